#ifndef AAI_TESTS_FIXTURES_HPP
#define AAI_TESTS_FIXTURES_HPP

#include "aai/align.hpp"
#include "aai/diffusion.hpp"
#include "aai/encoders.hpp"
#include "aai/synthdata.hpp"

namespace aai::test {

// Four classes, eight training clips each.
inline const synth::Dataset& tiny_dataset() {
    static const synth::Dataset ds = [] {
        synth::DatasetOptions o;
        o.num_classes = 4;
        o.train_per_class = 8;
        o.test_per_class = 2;
        return synth::generate_dataset(o);
    }();
    return ds;
}

inline const align::AlignCheckpoint& tiny_align() {
    static const align::AlignCheckpoint ck = [] {
        align::AlignConfig c;
        c.epochs = 5;
        c.batch_size = 8;
        return align::train_align(tiny_dataset(), c);
    }();
    return ck;
}

// A briefly trained denoiser on a short schedule; enough for contract tests.
inline const diff::TrainedDiffusion& tiny_diffusion() {
    static const diff::TrainedDiffusion td = [] {
        diff::DiffusionConfig c;
        c.T = 20;
        c.steps = 40;
        c.batch_size = 8;
        return diff::train_diffusion(tiny_dataset(), tiny_align().encoders.text, c);
    }();
    return td;
}

inline const diff::DiffusionModel& tiny_model() { return tiny_diffusion().model; }

}  // namespace aai::test

#endif  // AAI_TESTS_FIXTURES_HPP
