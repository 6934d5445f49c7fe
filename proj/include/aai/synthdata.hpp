#ifndef AAI_SYNTHDATA_HPP
#define AAI_SYNTHDATA_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aai/tensor.hpp"

namespace aai::synth {

inline constexpr int kSize = 16;      // spatial side of audio and image arrays
inline constexpr int kChannels = 3;   // image channels

// Shared latent of one class. Audio is a sinusoid along the frequency axis,
// the image a flat base color with vertical stripes.
struct ClassPrototype {
    int class_id = 0;
    double audio_freq = 0.0;
    double audio_phase = 0.0;
    std::array<double, 3> color{};
    int stripe_freq = 1;
    double stripe_phase = 0.0;
    std::string label_text;
};

enum class Split { train, test };

const char* split_name(Split s);
Split parse_split(const std::string& s);

struct TriModalSample {
    Tensor audio;                // [1×16×16]
    std::vector<Tensor> frames;  // each [3×16×16], values in [-1,1]
    int label_id = 0;
    int clip_id = 0;
    Split split = Split::train;
};

struct DatasetOptions {
    int num_classes = 8;
    int train_per_class = 32;
    int test_per_class = 8;
    int frames = 4;
    double noise_sigma = 0.1;
    std::uint64_t seed = 7;
};

struct Dataset {
    DatasetOptions options;
    std::vector<ClassPrototype> prototypes;
    std::vector<TriModalSample> samples;

    int num_classes() const { return static_cast<int>(prototypes.size()); }
    std::vector<const TriModalSample*> split(Split s) const;
    const TriModalSample& by_clip(int clip_id) const;
    int label_id(const std::string& label_text) const;
};

// Prototypes depend only on the class count, so every dataset with the same
// number of classes shares them (and the oracle).
std::vector<ClassPrototype> make_prototypes(int num_classes);

Tensor prototype_audio(const ClassPrototype& p);
Tensor prototype_image(const ClassPrototype& p);

Dataset generate_dataset(const DatasetOptions& options);

// Analytic classifier over the synthetic image classes.
class Oracle {
public:
    explicit Oracle(std::vector<ClassPrototype> prototypes);
    explicit Oracle(int num_classes) : Oracle(make_prototypes(num_classes)) {}

    // Mean color per channel plus a scaled dominant stripe frequency.
    static std::array<double, 4> feature(const Tensor& image);

    // Nearest prototype feature by L2; lowest class id wins ties.
    int classify(const Tensor& image) const;

    double accuracy(std::span<const Tensor> images, std::span<const int> labels) const;
    const std::vector<ClassPrototype>& prototypes() const { return prototypes_; }

private:
    std::vector<ClassPrototype> prototypes_;
    std::vector<std::array<double, 4>> features_;
};

}  // namespace aai::synth

#endif  // AAI_SYNTHDATA_HPP
