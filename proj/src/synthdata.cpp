#include "aai/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "aai/error.hpp"
#include "aai/params.hpp"

namespace aai::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kAudioAmp = 0.6;
constexpr double kAudioTimeAmp = 0.2;
constexpr double kStripeAmp = 0.25;
constexpr double kColorRange = 0.55;
constexpr double kMinColorGap = 0.3;
constexpr double kStripeWeight = 0.25;
constexpr std::uint64_t kPrototypeSeed = 0x5eedc0105ULL;

const char* const kLabelNames[] = {"sea",  "thunder", "fire",   "rain",  "wind",  "dog",   "engine", "bird",
                                   "bell", "train",   "crowd",  "siren", "frog",  "tiger", "clock",  "drum"};

double color_gap(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(s);
}

}  // namespace

const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(const std::string& s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "test") {
        return Split::test;
    }
    throw FormatError("unknown split '" + s + "'");
}

std::vector<ClassPrototype> make_prototypes(int num_classes) {
    require(num_classes >= 1, "num_classes must be >= 1");
    Rng rng(kPrototypeSeed);
    std::vector<ClassPrototype> out;
    out.reserve(num_classes);
    double gap = 0.5;
    int failures = 0;
    while (static_cast<int>(out.size()) < num_classes) {
        std::array<double, 3> color{};
        for (auto& c : color) {
            c = kColorRange * (2.0 * rng.uniform() - 1.0);
        }
        const bool ok = std::all_of(out.begin(), out.end(),
                                    [&](const ClassPrototype& p) { return color_gap(p.color, color) >= gap; });
        if (!ok) {
            ++failures;
            if (failures > 2000 && gap > kMinColorGap) {
                gap = std::max(kMinColorGap, gap - 0.05);
                failures = 0;
            }
            require(failures < 200000, "cannot place " + std::to_string(num_classes) + " class colors");
            continue;
        }
        ClassPrototype p;
        p.class_id = static_cast<int>(out.size());
        p.audio_freq = 0.75 + 0.45 * p.class_id;
        p.audio_phase = std::fmod(2.399963229728653 * p.class_id, kTwoPi);
        p.color = color;
        p.stripe_freq = 1 + p.class_id % 7;
        p.stripe_phase = std::fmod(1.3 * p.class_id, kTwoPi);
        p.label_text = p.class_id < 16 ? kLabelNames[p.class_id] : "class" + std::to_string(p.class_id);
        out.push_back(std::move(p));
    }
    return out;
}

Tensor prototype_audio(const ClassPrototype& p) {
    Tensor a(Shape{1, kSize, kSize});
    for (int f = 0; f < kSize; ++f) {
        for (int t = 0; t < kSize; ++t) {
            a.at(0, f, t) = kAudioAmp * std::sin(kTwoPi * p.audio_freq * f / kSize + p.audio_phase) +
                            kAudioTimeAmp * std::cos(kTwoPi * t / 8.0 + p.audio_phase);
        }
    }
    return a;
}

Tensor prototype_image(const ClassPrototype& p) {
    Tensor img(Shape{kChannels, kSize, kSize});
    for (int c = 0; c < kChannels; ++c) {
        for (int y = 0; y < kSize; ++y) {
            for (int x = 0; x < kSize; ++x) {
                img.at(c, y, x) = p.color[c] + kStripeAmp * std::sin(kTwoPi * p.stripe_freq * x / kSize + p.stripe_phase);
            }
        }
    }
    return img;
}

std::vector<const TriModalSample*> Dataset::split(Split s) const {
    std::vector<const TriModalSample*> out;
    for (const auto& smp : samples) {
        if (smp.split == s) {
            out.push_back(&smp);
        }
    }
    return out;
}

const TriModalSample& Dataset::by_clip(int clip_id) const {
    for (const auto& smp : samples) {
        if (smp.clip_id == clip_id) {
            return smp;
        }
    }
    throw ArgumentError("unknown clip id " + std::to_string(clip_id));
}

int Dataset::label_id(const std::string& label_text) const {
    for (const auto& p : prototypes) {
        if (p.label_text == label_text) {
            return p.class_id;
        }
    }
    throw ArgumentError("unknown label '" + label_text + "'");
}

Dataset generate_dataset(const DatasetOptions& options) {
    require(options.num_classes >= 2, "num_classes must be >= 2");
    require(options.train_per_class >= 1 && options.test_per_class >= 1, "per-class counts must be >= 1");
    require(options.frames >= 1, "frames per clip must be >= 1");
    require(options.noise_sigma >= 0.0 && std::isfinite(options.noise_sigma), "noise_sigma must be >= 0");

    Dataset ds;
    ds.options = options;
    ds.prototypes = make_prototypes(options.num_classes);
    std::vector<Tensor> audio_pat, image_pat;
    for (const auto& p : ds.prototypes) {
        audio_pat.push_back(prototype_audio(p));
        image_pat.push_back(prototype_image(p));
    }

    Rng rng(options.seed);
    int clip_id = 0;
    auto emit = [&](Split split, int per_class) {
        for (int c = 0; c < options.num_classes; ++c) {
            for (int i = 0; i < per_class; ++i) {
                TriModalSample s;
                s.label_id = c;
                s.clip_id = clip_id++;
                s.split = split;
                s.audio = audio_pat[c];
                for (auto& v : s.audio.values()) {
                    v += options.noise_sigma * rng.normal();
                }
                for (int f = 0; f < options.frames; ++f) {
                    Tensor frame = image_pat[c];
                    for (auto& v : frame.values()) {
                        v = std::clamp(v + options.noise_sigma * rng.normal(), -1.0, 1.0);
                    }
                    s.frames.push_back(std::move(frame));
                }
                ds.samples.push_back(std::move(s));
            }
        }
    };
    emit(Split::train, options.train_per_class);
    emit(Split::test, options.test_per_class);
    return ds;
}

Oracle::Oracle(std::vector<ClassPrototype> prototypes) : prototypes_(std::move(prototypes)) {
    require(!prototypes_.empty(), "oracle needs at least one class");
    for (const auto& p : prototypes_) {
        features_.push_back(feature(prototype_image(p)));
    }
}

std::array<double, 4> Oracle::feature(const Tensor& image) {
    require(image.shape() == Shape({kChannels, kSize, kSize}), "oracle expects a [3x16x16] image, got " +
                                                                   shape_str(image.shape()));
    require(image.all_finite(), "oracle input has non-finite entries");
    std::array<double, 4> f{};
    std::array<double, kSize> profile{};
    for (int c = 0; c < kChannels; ++c) {
        double s = 0.0;
        for (int y = 0; y < kSize; ++y) {
            for (int x = 0; x < kSize; ++x) {
                s += image.at(c, y, x);
                profile[x] += image.at(c, y, x);
            }
        }
        f[c] = s / (kSize * kSize);
    }
    double pmean = 0.0;
    for (double v : profile) {
        pmean += v;
    }
    pmean /= kSize;
    int best_k = 1;
    double best_power = -1.0;
    for (int k = 1; k <= kSize / 2; ++k) {
        double re = 0.0, im = 0.0;
        for (int x = 0; x < kSize; ++x) {
            re += (profile[x] - pmean) * std::cos(kTwoPi * k * x / kSize);
            im -= (profile[x] - pmean) * std::sin(kTwoPi * k * x / kSize);
        }
        const double power = re * re + im * im;
        if (power > best_power + 1e-12) {
            best_power = power;
            best_k = k;
        }
    }
    f[3] = kStripeWeight * best_k / (kSize / 2);
    return f;
}

int Oracle::classify(const Tensor& image) const {
    const auto f = feature(image);
    int best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < features_.size(); ++c) {
        double d = 0.0;
        for (int i = 0; i < 4; ++i) {
            d += (f[i] - features_[c][i]) * (f[i] - features_[c][i]);
        }
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

double Oracle::accuracy(std::span<const Tensor> images, std::span<const int> labels) const {
    require(images.size() == labels.size() && !images.empty(), "oracle accuracy needs matching nonempty inputs");
    int hits = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        hits += classify(images[i]) == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(images.size());
}

}  // namespace aai::synth
