#ifndef AAI_CLIIO_HPP
#define AAI_CLIIO_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aai/adapter.hpp"
#include "aai/align.hpp"
#include "aai/diffusion.hpp"
#include "aai/inject.hpp"
#include "aai/synthdata.hpp"

namespace aai::io {

namespace fs = std::filesystem;

// Tensor container: "AAIT", u16 version, u8 dtype, u8 ndim, u32 dims, then a
// row-major little-endian payload.
enum class Dtype : std::uint8_t { float32 = 0, float64 = 1 };

inline constexpr std::uint16_t kContainerVersion = 1;

std::string encode_tensor(const Tensor& t, Dtype dtype = Dtype::float64);
// Parses one container starting at `offset` and advances it past the payload.
Tensor decode_tensor(const std::string& bytes, std::size_t& offset);
Tensor decode_tensor(const std::string& bytes);

void save_tensor(const fs::path& path, const Tensor& t, Dtype dtype = Dtype::float64);
Tensor load_tensor(const fs::path& path);

// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

// Binary PPM (P6, maxval 255) of a [3×H×W] image in [-1,1].
std::string encode_ppm(const Tensor& image);
void write_image(const fs::path& path, const Tensor& image);
Tensor decode_ppm(const std::string& bytes);

// Flat run configuration; keys not listed here are rejected.
struct RunConfig {
    synth::DatasetOptions dataset;
    align::AlignConfig align;
    diff::DiffusionConfig diffusion;
    adapt::AdaptConfig adapter;
    double injection_fraction = 1.0;
    bool renormalize = true;
    std::uint64_t seed = 7;

    static const std::vector<std::string>& keys();

    // Applies one key; throws ArgumentError naming the key on a bad value.
    void set(const std::string& key, const nlohmann::json& value);
    void merge(const nlohmann::json& flat);
    void validate() const;
    nlohmann::json to_json() const;

    // Propagates `seed` into every stage's own seed field.
    void apply_seed(std::uint64_t s);
};

RunConfig load_config(const fs::path& path);
RunConfig parse_config(const std::string& text, const std::string& origin = "config");

// One checkpoint is one directory: manifest.json plus one container per tensor.
void save_dataset(const fs::path& dir, const synth::Dataset& dataset);
synth::Dataset load_dataset(const fs::path& dir);

void save_align(const fs::path& dir, const align::AlignCheckpoint& ckpt, const std::string& data_dir);
align::AlignCheckpoint load_align(const fs::path& dir);

void save_diffusion(const fs::path& dir, const diff::TrainedDiffusion& trained, const diff::DiffusionConfig& config,
                    const std::string& align_dir);
diff::DiffusionModel load_diffusion(const fs::path& dir);

// A pseudo-token file: "AAIK", u32 header length, JSON header, then the
// f_a and f_adapter containers.
std::string encode_token(const adapt::PseudoToken& token, const nlohmann::json& extra);
adapt::PseudoToken decode_token(const std::string& bytes, nlohmann::json* header = nullptr);
void save_token(const fs::path& path, const adapt::PseudoToken& token, const nlohmann::json& extra);
adapt::PseudoToken load_token(const fs::path& path, nlohmann::json* header = nullptr);

nlohmann::json read_manifest(const fs::path& dir, const std::string& kind);

std::string loss_csv(const std::vector<std::string>& columns, const std::vector<std::vector<double>>& rows);

std::string format_double(double v);

}  // namespace aai::io

#endif  // AAI_CLIIO_HPP
