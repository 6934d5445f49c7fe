#ifndef AAI_EVALSUITE_HPP
#define AAI_EVALSUITE_HPP

#include <map>
#include <span>
#include <string>
#include <vector>

#include "aai/align.hpp"
#include "aai/synthdata.hpp"
#include "aai/tensor.hpp"

namespace aai::eval {

enum class Direction { a2v, v2a, a2t, t2a };

const char* direction_name(Direction d);

struct RetrievalResult {
    std::map<int, double> recall_at;  // K -> recall in [0,1]
    Direction direction = Direction::a2v;
    int num_queries = 0;
};

// Gallery indices sorted by descending cosine similarity; ties go to the
// lower index.
std::vector<int> rank_gallery(std::span<const double> query, const Tensor& gallery);

// Instance-level recall: query i is a hit at K if ground_truth[i] is among
// its top-K gallery items.
RetrievalResult recall_at_k(const Tensor& queries, const Tensor& gallery, std::span<const int> ground_truth,
                            std::span<const int> ks, Direction direction = Direction::a2v);

// Class-level recall: a hit at K if any top-K gallery item carries the
// query's label.
RetrievalResult recall_at_k_by_label(const Tensor& queries, const Tensor& gallery, std::span<const int> query_labels,
                                     std::span<const int> gallery_labels, std::span<const int> ks,
                                     Direction direction = Direction::a2v);

// Argmax cosine similarity over label embeddings; lowest class id wins ties.
int zero_shot_classify(std::span<const double> audio_emb, const Tensor& label_embs);

// Mean zero-shot accuracy of the checkpoint's audio encoder on the test split.
double audio_text_retrieval_accuracy(const align::AlignCheckpoint& ckpt, const synth::Dataset& dataset);

struct EvalReport {
    std::vector<RetrievalResult> instance;  // ground truth = the paired clip
    std::vector<RetrievalResult> by_class;  // ground truth = any item of the label
    double zero_shot_accuracy = 0.0;
    int num_test_clips = 0;
};

// Full protocol on the test split: gallery frames are each clip's first frame.
EvalReport evaluate(const align::AlignCheckpoint& ckpt, const synth::Dataset& dataset);

}  // namespace aai::eval

#endif  // AAI_EVALSUITE_HPP
