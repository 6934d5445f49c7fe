#include "aai/evalsuite.hpp"

#include <algorithm>
#include <numeric>

#include "aai/error.hpp"

namespace aai::eval {

namespace {

std::span<const double> row(const Tensor& t, int i) {
    return {t.data() + static_cast<std::size_t>(i) * t.dim(1), static_cast<std::size_t>(t.dim(1))};
}

void check_inputs(const Tensor& queries, const Tensor& gallery, std::span<const int> ks) {
    require(queries.ndim() == 2 && gallery.ndim() == 2, "retrieval needs [N×d] query and gallery matrices");
    require(gallery.dim(0) > 0, "retrieval gallery is empty");
    require(queries.dim(1) == gallery.dim(1), "query and gallery dimensions differ");
    require(!ks.empty(), "no K values requested");
    for (int k : ks) {
        require(k >= 1, "K must be >= 1");
        require(k <= gallery.dim(0), "K=" + std::to_string(k) + " exceeds gallery size " +
                                         std::to_string(gallery.dim(0)));
    }
}

template <typename HitAt>
RetrievalResult tally(const Tensor& queries, const Tensor& gallery, std::span<const int> ks, Direction dir,
                      HitAt hit_rank) {
    RetrievalResult r;
    r.direction = dir;
    r.num_queries = queries.dim(0);
    std::vector<int> hits(ks.size(), 0);
    for (int q = 0; q < queries.dim(0); ++q) {
        const std::vector<int> ranked = rank_gallery(row(queries, q), gallery);
        const int first = hit_rank(q, ranked);  // 0-based rank of the first relevant item, or -1
        for (std::size_t i = 0; i < ks.size(); ++i) {
            hits[i] += (first >= 0 && first < ks[i]) ? 1 : 0;
        }
    }
    for (std::size_t i = 0; i < ks.size(); ++i) {
        r.recall_at[ks[i]] = r.num_queries ? static_cast<double>(hits[i]) / r.num_queries : 0.0;
    }
    return r;
}

std::vector<int> usable_ks(int gallery_size) {
    std::vector<int> ks;
    for (int k : {1, 5, 10}) {
        if (k <= gallery_size) {
            ks.push_back(k);
        }
    }
    return ks;
}

}  // namespace

const char* direction_name(Direction d) {
    switch (d) {
    case Direction::a2v:
        return "a2v";
    case Direction::v2a:
        return "v2a";
    case Direction::a2t:
        return "a2t";
    case Direction::t2a:
        return "t2a";
    }
    return "?";
}

std::vector<int> rank_gallery(std::span<const double> query, const Tensor& gallery) {
    const int n = gallery.dim(0);
    std::vector<double> sims(n);
    for (int i = 0; i < n; ++i) {
        sims[i] = enc::cosine_sim(query, row(gallery, i));
    }
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return sims[a] > sims[b]; });
    return idx;
}

RetrievalResult recall_at_k(const Tensor& queries, const Tensor& gallery, std::span<const int> ground_truth,
                            std::span<const int> ks, Direction direction) {
    check_inputs(queries, gallery, ks);
    require(ground_truth.size() == static_cast<std::size_t>(queries.dim(0)), "ground truth must cover every query");
    for (int g : ground_truth) {
        require(g >= 0 && g < gallery.dim(0), "ground truth index outside the gallery");
    }
    return tally(queries, gallery, ks, direction, [&](int q, const std::vector<int>& ranked) {
        const auto it = std::find(ranked.begin(), ranked.end(), ground_truth[q]);
        return static_cast<int>(it - ranked.begin());
    });
}

RetrievalResult recall_at_k_by_label(const Tensor& queries, const Tensor& gallery, std::span<const int> query_labels,
                                     std::span<const int> gallery_labels, std::span<const int> ks,
                                     Direction direction) {
    check_inputs(queries, gallery, ks);
    require(query_labels.size() == static_cast<std::size_t>(queries.dim(0)), "query labels must cover every query");
    require(gallery_labels.size() == static_cast<std::size_t>(gallery.dim(0)), "gallery labels must cover gallery");
    return tally(queries, gallery, ks, direction, [&](int q, const std::vector<int>& ranked) {
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            if (gallery_labels[ranked[r]] == query_labels[q]) {
                return static_cast<int>(r);
            }
        }
        return -1;
    });
}

int zero_shot_classify(std::span<const double> audio_emb, const Tensor& label_embs) {
    require(label_embs.ndim() == 2 && label_embs.dim(0) > 0, "zero-shot classification needs a nonempty label set");
    return rank_gallery(audio_emb, label_embs).front();
}

double audio_text_retrieval_accuracy(const align::AlignCheckpoint& ckpt, const synth::Dataset& dataset) {
    const auto test = dataset.split(synth::Split::test);
    require(!test.empty(), "test split is empty");
    std::vector<Tensor> audio;
    for (const auto* s : test) {
        audio.push_back(s->audio);
    }
    const Tensor fa = enc::encode_audio_batch(ckpt.encoders.audio, audio);
    const Tensor labels = enc::encode_text_all(ckpt.encoders.text);
    int hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        hits += zero_shot_classify(row(fa, static_cast<int>(i)), labels) == test[i]->label_id ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

EvalReport evaluate(const align::AlignCheckpoint& ckpt, const synth::Dataset& dataset) {
    const auto test = dataset.split(synth::Split::test);
    require(!test.empty(), "test split is empty");
    std::vector<Tensor> audio, frames;
    std::vector<int> labels, identity(test.size());
    for (const auto* s : test) {
        audio.push_back(s->audio);
        frames.push_back(s->frames.front());
        labels.push_back(s->label_id);
    }
    std::iota(identity.begin(), identity.end(), 0);
    const Tensor fa = enc::encode_audio_batch(ckpt.encoders.audio, audio);
    const Tensor fv = enc::encode_vision_batch(ckpt.encoders.vision, frames);
    const Tensor ft = enc::encode_text_all(ckpt.encoders.text);
    std::vector<int> class_ids(ft.dim(0));
    std::iota(class_ids.begin(), class_ids.end(), 0);

    EvalReport rep;
    rep.num_test_clips = static_cast<int>(test.size());
    const auto clip_ks = usable_ks(static_cast<int>(test.size()));
    const auto label_ks = usable_ks(ft.dim(0));
    rep.instance.push_back(recall_at_k(fa, fv, identity, clip_ks, Direction::a2v));
    rep.instance.push_back(recall_at_k(fv, fa, identity, clip_ks, Direction::v2a));
    rep.instance.push_back(recall_at_k(fa, ft, labels, label_ks, Direction::a2t));
    rep.by_class.push_back(recall_at_k_by_label(fa, fv, labels, labels, clip_ks, Direction::a2v));
    rep.by_class.push_back(recall_at_k_by_label(fv, fa, labels, labels, clip_ks, Direction::v2a));
    rep.by_class.push_back(recall_at_k_by_label(fa, ft, labels, class_ids, label_ks, Direction::a2t));
    rep.by_class.push_back(recall_at_k_by_label(ft, fa, class_ids, labels, clip_ks, Direction::t2a));
    rep.zero_shot_accuracy = audio_text_retrieval_accuracy(ckpt, dataset);
    return rep;
}

}  // namespace aai::eval
