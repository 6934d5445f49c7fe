#ifndef AAI_ALIGN_HPP
#define AAI_ALIGN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "aai/autograd.hpp"
#include "aai/encoders.hpp"
#include "aai/params.hpp"
#include "aai/synthdata.hpp"

namespace aai::align {

// Cosine similarities divided by the temperature; row i is audio_i, column j
// is other_j, and the diagonal holds the positive pairs.
struct SimilarityMatrix {
    Tensor values;
    double tau = 0.07;
};

SimilarityMatrix similarity(const Tensor& audio, const Tensor& other, double tau);

Tensor softmax_rows(const Tensor& logits);

// Mean over rows of -log softmax(S_i)[i]. The positive pair is part of the
// denominator unless exclude_positive is set (literal printed form).
double infonce_direction(const SimilarityMatrix& s, bool exclude_positive = false);

// Symmetric contrastive loss ½(H(a→m) + H(m→a)) for row-aligned batches.
double infonce_loss(const Tensor& audio, const Tensor& other, double tau, bool exclude_positive = false);
ad::Var infonce_loss(const ad::Var& audio, const ad::Var& other, double tau, bool exclude_positive = false);

// Row-mean KL(q‖p) for probability rows.
double kl_rows(const Tensor& q, const Tensor& p);

// KL(q_a2v‖p_a2v) + KL(q_v2a‖p_v2a), each averaged over rows.
double momentum_kl_loss(const Tensor& p_a2v, const Tensor& p_v2a, const Tensor& q_a2v, const Tensor& q_v2a);

struct MomentumTeacher {
    ParamSet shadow;
    double momentum = 0.995;
};

MomentumTeacher make_teacher(const ParamSet& student, double momentum);

// shadow <- m*shadow + (1-m)*student for every array.
MomentumTeacher ema_update(const MomentumTeacher& teacher, const ParamSet& student);
void ema_update_in_place(MomentumTeacher& teacher, const ParamSet& student);

struct AlignLossReport {
    double loss_at = 0.0;
    double loss_av = 0.0;
    double loss_t = 0.0;
    double total = 0.0;
    double alpha = 0.0;

    // |total - (loss_at + (1-alpha) loss_av + alpha/2 loss_t)|
    double recomposition_error() const;
};

struct AlignConfig {
    int dim = 32;
    double tau = 0.07;
    double alpha = 0.4;
    int batch_size = 32;
    int epochs = 30;
    double lr = 1e-3;
    double weight_decay = 0.02;
    double momentum = 0.995;
    bool exclude_positive_denominator = false;
    std::uint64_t seed = 7;

    void validate() const;
};

struct AlignEncoders {
    enc::EncoderParams audio;
    enc::EncoderParams vision;
    enc::EncoderParams text;
};

AlignEncoders init_encoders(int num_classes, int dim, std::uint64_t seed);

struct AlignBatch {
    std::vector<Tensor> audio;   // each [1×16×16]
    std::vector<Tensor> frames;  // each [3×16×16], one per audio
    std::vector<int> labels;
};

// Graph of the total objective. Audio parameters are trainable leaves; teacher
// parameters are leaves too but the pseudo-targets are built from detached
// values, so their gradient stays exactly zero.
struct LossGraph {
    ad::Var total;
    AlignLossReport report;
    ParamVars audio_vars;
    ParamVars teacher_vars;
};

LossGraph build_total_loss(const AlignBatch& batch, const AlignEncoders& encoders, const MomentumTeacher& teacher,
                           double tau, double alpha, bool exclude_positive = false);

AlignLossReport total_loss(const AlignBatch& batch, const AlignEncoders& encoders, const MomentumTeacher& teacher,
                           double tau, double alpha, bool exclude_positive = false);

struct AlignCheckpoint {
    AlignEncoders encoders;
    MomentumTeacher teacher;
    AlignConfig config;
    std::vector<AlignLossReport> history;  // one entry per optimizer step
    int steps_per_epoch = 0;
    std::vector<std::string> label_names;
};

AlignCheckpoint init_checkpoint(const synth::Dataset& dataset, const AlignConfig& config);

// Mini-batch AdamW on the audio encoder only; the teacher follows the vision
// encoder by EMA after every step.
AlignCheckpoint train_align(const synth::Dataset& dataset, const AlignConfig& config);

std::vector<double> epoch_mean_totals(const AlignCheckpoint& ckpt);

}  // namespace aai::align

#endif  // AAI_ALIGN_HPP
