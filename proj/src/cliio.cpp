#include "aai/cliio.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include "aai/error.hpp"

namespace aai::io {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "containers are written in native little-endian order");

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& bytes, std::size_t& offset, const char* what) {
    if (bytes.size() < offset + sizeof(T)) {
        throw FormatError(std::string("truncated container: ") + what + " needs bytes " + std::to_string(offset) +
                          ".." + std::to_string(offset + sizeof(T)) + " but data ends at byte " +
                          std::to_string(bytes.size()));
    }
    T v;
    std::memcpy(&v, bytes.data() + offset, sizeof(T));
    offset += sizeof(T);
    return v;
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string encode_tensor(const Tensor& t, Dtype dtype) {
    require(t.all_finite(), "cannot serialize a tensor with non-finite entries");
    require(t.ndim() <= 255, "too many dimensions for the container");
    std::string out = "AAIT";
    put<std::uint16_t>(out, kContainerVersion);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
    for (int d : t.shape()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.values()) {
        if (dtype == Dtype::float32) {
            put<float>(out, static_cast<float>(v));
        } else {
            put<double>(out, v);
        }
    }
    return out;
}

Tensor decode_tensor(const std::string& bytes, std::size_t& offset) {
    const std::size_t start = offset;
    if (bytes.size() < start + 4) {
        throw FormatError("truncated container: magic needs bytes " + std::to_string(start) + ".." +
                          std::to_string(start + 4) + " but data ends at byte " + std::to_string(bytes.size()));
    }
    if (bytes.compare(start, 4, "AAIT") != 0) {
        throw FormatError("bad container magic at byte " + std::to_string(start) + " (expected AAIT)");
    }
    offset += 4;
    const auto version = get<std::uint16_t>(bytes, offset, "version");
    if (version != kContainerVersion) {
        throw FormatError("unsupported container version " + std::to_string(version) + " at byte " +
                          std::to_string(start + 4));
    }
    const auto dtype = get<std::uint8_t>(bytes, offset, "dtype");
    if (dtype > 1) {
        throw FormatError("unknown dtype code " + std::to_string(dtype) + " at byte " + std::to_string(start + 6));
    }
    const auto ndim = get<std::uint8_t>(bytes, offset, "ndim");
    Shape shape;
    for (int i = 0; i < ndim; ++i) {
        const auto d = get<std::uint32_t>(bytes, offset, "shape");
        if (d > static_cast<std::uint32_t>(INT32_MAX)) {
            throw FormatError("dimension too large at byte " + std::to_string(offset - 4));
        }
        shape.push_back(static_cast<int>(d));
    }
    const std::size_t count = shape_numel(shape);
    const std::size_t width = dtype == 0 ? 4 : 8;
    if ((bytes.size() - offset) / width < count) {
        throw FormatError("truncated payload: " + std::to_string(count * width) + " bytes expected from byte " +
                          std::to_string(offset) + " but data ends at byte " + std::to_string(bytes.size()));
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        values[i] = dtype == 0 ? static_cast<double>(get<float>(bytes, offset, "payload"))
                               : get<double>(bytes, offset, "payload");
    }
    return Tensor(std::move(shape), std::move(values));
}

Tensor decode_tensor(const std::string& bytes) {
    std::size_t offset = 0;
    Tensor t = decode_tensor(bytes, offset);
    if (offset != bytes.size()) {
        throw FormatError("trailing bytes after container payload at byte " + std::to_string(offset));
    }
    return t;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw std::runtime_error("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void save_tensor(const fs::path& path, const Tensor& t, Dtype dtype) { write_file_atomic(path, encode_tensor(t, dtype)); }

Tensor load_tensor(const fs::path& path) {
    try {
        return decode_tensor(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string encode_ppm(const Tensor& image) {
    require(image.ndim() == 3 && image.dim(0) == 3, "image must be [3×H×W], got " + shape_str(image.shape()));
    require(image.all_finite(), "image has non-finite entries");
    const int h = image.dim(1), w = image.dim(2);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = image[(static_cast<std::size_t>(c) * h + y) * w + x];
                const long b = std::lround((v + 1.0) / 2.0 * 255.0);
                out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(b, 0L, 255L))));
            }
        }
    }
    return out;
}

void write_image(const fs::path& path, const Tensor& image) { write_file_atomic(path, encode_ppm(image)); }

Tensor decode_ppm(const std::string& bytes) {
    std::istringstream is(bytes);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
        throw FormatError("not a binary 8-bit PPM");
    }
    const std::size_t start = static_cast<std::size_t>(is.tellg()) + 1;
    if (bytes.size() != start + static_cast<std::size_t>(w) * h * 3) {
        throw FormatError("PPM payload has " + std::to_string(bytes.size() - start) + " bytes, expected " +
                          std::to_string(w * h * 3));
    }
    Tensor img(Shape{3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const auto b = static_cast<unsigned char>(bytes[start + (static_cast<std::size_t>(y) * w + x) * 3 + c]);
                img[(static_cast<std::size_t>(c) * h + y) * w + x] = b / 255.0 * 2.0 - 1.0;
            }
        }
    }
    return img;
}

// ---- configuration ----

namespace {

struct Key {
    std::function<void(RunConfig&, const json&)> set;
    std::function<json(const RunConfig&)> get;
};

[[noreturn]] void bad(const std::string& key, const std::string& why) {
    throw ArgumentError("config key '" + key + "': " + why);
}

double as_number(const std::string& key, const json& v) {
    if (!v.is_number()) {
        bad(key, "expected a number, got " + v.dump());
    }
    const double d = v.get<double>();
    if (!std::isfinite(d)) {
        bad(key, "must be finite");
    }
    return d;
}

long long as_int(const std::string& key, const json& v) {
    if (!v.is_number_integer()) {
        bad(key, "expected an integer, got " + v.dump());
    }
    return v.get<long long>();
}

bool as_bool(const std::string& key, const json& v) {
    if (!v.is_boolean()) {
        bad(key, "expected true or false, got " + v.dump());
    }
    return v.get<bool>();
}

int int_at_least(const std::string& key, const json& v, long long lo) {
    const long long x = as_int(key, v);
    if (x < lo || x > 1'000'000'000) {
        bad(key, "must be an integer >= " + std::to_string(lo) + ", got " + std::to_string(x));
    }
    return static_cast<int>(x);
}

double in_range(const std::string& key, const json& v, double lo, double hi, bool open_lo = false) {
    const double x = as_number(key, v);
    if (x > hi || x < lo || (open_lo && x == lo)) {
        bad(key, "must be in " + std::string(open_lo ? "(" : "[") + format_double(lo) + ", " + format_double(hi) +
                     "], got " + v.dump());
    }
    return x;
}

const std::map<std::string, Key>& table() {
    static const std::map<std::string, Key> t = [] {
        std::map<std::string, Key> m;
        const double inf = INFINITY;
        m["num_classes"] = {[](RunConfig& c, const json& v) { c.dataset.num_classes = int_at_least("num_classes", v, 2); },
                            [](const RunConfig& c) { return json(c.dataset.num_classes); }};
        m["train_per_class"] = {
            [](RunConfig& c, const json& v) { c.dataset.train_per_class = int_at_least("train_per_class", v, 1); },
            [](const RunConfig& c) { return json(c.dataset.train_per_class); }};
        m["test_per_class"] = {
            [](RunConfig& c, const json& v) { c.dataset.test_per_class = int_at_least("test_per_class", v, 1); },
            [](const RunConfig& c) { return json(c.dataset.test_per_class); }};
        m["frames"] = {[](RunConfig& c, const json& v) { c.dataset.frames = int_at_least("frames", v, 1); },
                       [](const RunConfig& c) { return json(c.dataset.frames); }};
        m["noise_sigma"] = {
            [inf](RunConfig& c, const json& v) { c.dataset.noise_sigma = in_range("noise_sigma", v, 0.0, inf); },
            [](const RunConfig& c) { return json(c.dataset.noise_sigma); }};
        m["d"] = {[](RunConfig& c, const json& v) { c.align.dim = int_at_least("d", v, 2); },
                  [](const RunConfig& c) { return json(c.align.dim); }};
        m["tau"] = {[inf](RunConfig& c, const json& v) { c.align.tau = in_range("tau", v, 0.0, inf, true); },
                    [](const RunConfig& c) { return json(c.align.tau); }};
        m["alpha"] = {[](RunConfig& c, const json& v) { c.align.alpha = in_range("alpha", v, 0.0, 1.0); },
                      [](const RunConfig& c) { return json(c.align.alpha); }};
        m["batch_size"] = {[](RunConfig& c, const json& v) { c.align.batch_size = int_at_least("batch_size", v, 2); },
                           [](const RunConfig& c) { return json(c.align.batch_size); }};
        m["epochs"] = {[](RunConfig& c, const json& v) { c.align.epochs = int_at_least("epochs", v, 0); },
                       [](const RunConfig& c) { return json(c.align.epochs); }};
        m["lr"] = {[inf](RunConfig& c, const json& v) { c.align.lr = in_range("lr", v, 0.0, inf, true); },
                   [](const RunConfig& c) { return json(c.align.lr); }};
        m["weight_decay"] = {
            [inf](RunConfig& c, const json& v) { c.align.weight_decay = in_range("weight_decay", v, 0.0, inf); },
            [](const RunConfig& c) { return json(c.align.weight_decay); }};
        m["momentum"] = {[](RunConfig& c, const json& v) { c.align.momentum = in_range("momentum", v, 0.0, 1.0); },
                         [](const RunConfig& c) { return json(c.align.momentum); }};
        m["exclude_positive_denominator"] = {
            [](RunConfig& c, const json& v) {
                c.align.exclude_positive_denominator = as_bool("exclude_positive_denominator", v);
            },
            [](const RunConfig& c) { return json(c.align.exclude_positive_denominator); }};
        m["T"] = {[](RunConfig& c, const json& v) { c.diffusion.T = int_at_least("T", v, 2); },
                  [](const RunConfig& c) { return json(c.diffusion.T); }};
        m["beta_start"] = {
            [](RunConfig& c, const json& v) { c.diffusion.beta_start = in_range("beta_start", v, 0.0, 1.0, true); },
            [](const RunConfig& c) { return json(c.diffusion.beta_start); }};
        m["beta_end"] = {
            [](RunConfig& c, const json& v) { c.diffusion.beta_end = in_range("beta_end", v, 0.0, 1.0, true); },
            [](const RunConfig& c) { return json(c.diffusion.beta_end); }};
        m["diffusion_steps"] = {
            [](RunConfig& c, const json& v) { c.diffusion.steps = int_at_least("diffusion_steps", v, 0); },
            [](const RunConfig& c) { return json(c.diffusion.steps); }};
        m["diffusion_batch_size"] = {
            [](RunConfig& c, const json& v) { c.diffusion.batch_size = int_at_least("diffusion_batch_size", v, 1); },
            [](const RunConfig& c) { return json(c.diffusion.batch_size); }};
        m["diffusion_lr"] = {
            [inf](RunConfig& c, const json& v) { c.diffusion.lr = in_range("diffusion_lr", v, 0.0, inf, true); },
            [](const RunConfig& c) { return json(c.diffusion.lr); }};
        m["k"] = {[](RunConfig& c, const json& v) { c.adapter.k = int_at_least("k", v, 1); },
                  [](const RunConfig& c) { return json(c.adapter.k); }};
        m["adapt_steps"] = {[](RunConfig& c, const json& v) { c.adapter.steps = int_at_least("adapt_steps", v, 0); },
                            [](const RunConfig& c) { return json(c.adapter.steps); }};
        m["adapt_lr"] = {
            [inf](RunConfig& c, const json& v) { c.adapter.lr = in_range("adapt_lr", v, 0.0, inf, true); },
            [](const RunConfig& c) { return json(c.adapter.lr); }};
        m["adapt_init_scale"] = {
            [inf](RunConfig& c, const json& v) { c.adapter.init_scale = in_range("adapt_init_scale", v, 0.0, inf); },
            [](const RunConfig& c) { return json(c.adapter.init_scale); }};
        m["append_token"] = {[](RunConfig& c, const json& v) { c.adapter.append_token = as_bool("append_token", v); },
                             [](const RunConfig& c) { return json(c.adapter.append_token); }};
        m["injection_fraction"] = {
            [](RunConfig& c, const json& v) { c.injection_fraction = in_range("injection_fraction", v, 0.0, 1.0); },
            [](const RunConfig& c) { return json(c.injection_fraction); }};
        m["renormalize"] = {[](RunConfig& c, const json& v) { c.renormalize = as_bool("renormalize", v); },
                            [](const RunConfig& c) { return json(c.renormalize); }};
        m["seed"] = {[](RunConfig& c, const json& v) {
                         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
                             bad("seed", "expected a non-negative integer, got " + v.dump());
                         }
                         c.apply_seed(v.get<std::uint64_t>());
                     },
                     [](const RunConfig& c) { return json(c.seed); }};
        return m;
    }();
    return t;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& [name, _] : table()) {
            out.push_back(name);
        }
        return out;
    }();
    return k;
}

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    dataset.seed = s;
    align.seed = s;
    diffusion.seed = s;
    adapter.seed = s;
}

void RunConfig::set(const std::string& key, const json& value) {
    const auto it = table().find(key);
    if (it == table().end()) {
        throw ArgumentError("unknown config key '" + key + "'");
    }
    it->second.set(*this, value);
}

void RunConfig::merge(const json& flat) {
    if (!flat.is_object()) {
        throw ArgumentError("config must be a flat JSON object");
    }
    for (const auto& [key, value] : flat.items()) {
        set(key, value);
    }
    validate();
}

void RunConfig::validate() const {
    if (!(diffusion.beta_start < diffusion.beta_end)) {
        bad("beta_start", "must be below beta_end");
    }
    align.validate();
    diffusion.validate();
    adapter.validate();
}

json RunConfig::to_json() const {
    json j = json::object();
    for (const auto& [name, key] : table()) {
        j[name] = key.get(*this);
    }
    return j;
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ArgumentError(origin + " is not valid JSON: " + e.what());
    }
    RunConfig c;
    c.merge(j);
    return c;
}

RunConfig load_config(const fs::path& path) { return parse_config(read_file(path), path.string()); }

// ---- checkpoints ----

namespace {

std::string file_name(const std::string& group, const std::string& name) { return group + "." + name + ".aai"; }

json save_group(const fs::path& dir, const std::string& group, const ParamSet& params) {
    json names = json::array();
    for (const auto& item : params.items()) {
        save_tensor(dir / file_name(group, item.name), item.value);
        names.push_back(item.name);
    }
    return {{"tensors", names}, {"checksum", hex(params.checksum())}};
}

ParamSet load_group(const fs::path& dir, const std::string& group, const json& meta) {
    ParamSet ps;
    for (const auto& n : meta.at("tensors")) {
        const std::string name = n.get<std::string>();
        ps.add(name, load_tensor(dir / file_name(group, name)));
    }
    if (meta.contains("checksum") && meta.at("checksum").get<std::string>() != hex(ps.checksum())) {
        throw FormatError(dir.string() + ": checksum mismatch for parameter group '" + group + "'");
    }
    return ps;
}

void write_manifest(const fs::path& dir, const json& manifest) {
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

json align_config_json(const align::AlignConfig& c) {
    return {{"d", c.dim},
            {"tau", c.tau},
            {"alpha", c.alpha},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"momentum", c.momentum},
            {"exclude_positive_denominator", c.exclude_positive_denominator},
            {"seed", c.seed}};
}

align::AlignConfig align_config_from(const json& j) {
    align::AlignConfig c;
    c.dim = j.at("d");
    c.tau = j.at("tau");
    c.alpha = j.at("alpha");
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.lr = j.at("lr");
    c.weight_decay = j.at("weight_decay");
    c.momentum = j.at("momentum");
    c.exclude_positive_denominator = j.at("exclude_positive_denominator");
    c.seed = j.at("seed");
    return c;
}

template <typename F>
auto guard_manifest(const fs::path& dir, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw FormatError(dir.string() + ": malformed manifest: " + e.what());
    }
}

}  // namespace

json read_manifest(const fs::path& dir, const std::string& kind) {
    const fs::path p = dir / "manifest.json";
    if (!fs::exists(p)) {
        throw std::runtime_error("no manifest.json in " + dir.string());
    }
    json j;
    try {
        j = json::parse(read_file(p));
    } catch (const json::parse_error& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
    if (!j.is_object() || j.value("kind", "") != kind) {
        throw FormatError(p.string() + ": expected a '" + kind + "' checkpoint");
    }
    return j;
}

void save_dataset(const fs::path& dir, const synth::Dataset& ds) {
    require(!ds.samples.empty(), "dataset is empty");
    const int n = static_cast<int>(ds.samples.size());
    const int frames = static_cast<int>(ds.samples.front().frames.size());
    std::vector<Tensor> audio, video;
    json clips = json::array();
    for (const auto& s : ds.samples) {
        audio.push_back(s.audio);
        video.push_back(stack(s.frames));
        clips.push_back({{"clip_id", s.clip_id}, {"label_id", s.label_id}, {"split", synth::split_name(s.split)}});
    }
    const Tensor a = stack(audio), v = stack(video);
    save_tensor(dir / "audio.aai", a);
    save_tensor(dir / "frames.aai", v);
    json labels = json::array();
    for (const auto& p : ds.prototypes) {
        labels.push_back(p.label_text);
    }
    const auto& o = ds.options;
    write_manifest(dir, {{"kind", "dataset"},
                         {"format_version", 1},
                         {"options",
                          {{"num_classes", o.num_classes},
                           {"train_per_class", o.train_per_class},
                           {"test_per_class", o.test_per_class},
                           {"frames", o.frames},
                           {"noise_sigma", o.noise_sigma},
                           {"seed", o.seed}}},
                         {"num_clips", n},
                         {"frames_per_clip", frames},
                         {"label_names", labels},
                         {"clips", clips},
                         {"checksums", {{"audio", hex(checksum(a))}, {"frames", hex(checksum(v))}}}});
}

synth::Dataset load_dataset(const fs::path& dir) {
    const json m = read_manifest(dir, "dataset");
    return guard_manifest(dir, [&] {
        synth::Dataset ds;
        const json& o = m.at("options");
        ds.options.num_classes = o.at("num_classes");
        ds.options.train_per_class = o.at("train_per_class");
        ds.options.test_per_class = o.at("test_per_class");
        ds.options.frames = o.at("frames");
        ds.options.noise_sigma = o.at("noise_sigma");
        ds.options.seed = o.at("seed");
        ds.prototypes = synth::make_prototypes(ds.options.num_classes);
        const Tensor a = load_tensor(dir / "audio.aai");
        const Tensor v = load_tensor(dir / "frames.aai");
        if (hex(checksum(a)) != m.at("checksums").at("audio") || hex(checksum(v)) != m.at("checksums").at("frames")) {
            throw FormatError(dir.string() + ": dataset arrays do not match the manifest checksums");
        }
        const json& clips = m.at("clips");
        if (a.ndim() != 4 || v.ndim() != 5 || a.dim(0) != static_cast<int>(clips.size()) || v.dim(0) != a.dim(0)) {
            throw FormatError(dir.string() + ": dataset arrays do not match the clip list");
        }
        for (int i = 0; i < a.dim(0); ++i) {
            synth::TriModalSample s;
            s.audio = a.slice0(i);
            const Tensor fr = v.slice0(i);
            for (int f = 0; f < fr.dim(0); ++f) {
                s.frames.push_back(fr.slice0(f));
            }
            s.clip_id = clips[i].at("clip_id");
            s.label_id = clips[i].at("label_id");
            s.split = synth::parse_split(clips[i].at("split"));
            ds.samples.push_back(std::move(s));
        }
        return ds;
    });
}

void save_align(const fs::path& dir, const align::AlignCheckpoint& ck, const std::string& data_dir) {
    json groups;
    groups["audio"] = save_group(dir, "audio", ck.encoders.audio.params);
    groups["vision"] = save_group(dir, "vision", ck.encoders.vision.params);
    groups["text"] = save_group(dir, "text", ck.encoders.text.params);
    groups["teacher"] = save_group(dir, "teacher", ck.teacher.shadow);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < ck.history.size(); ++i) {
        const auto& h = ck.history[i];
        rows.push_back({static_cast<double>(i), h.loss_at, h.loss_av, h.loss_t, h.total});
    }
    write_file_atomic(dir / "loss.csv", loss_csv({"step", "loss_at", "loss_av", "loss_t", "total"}, rows));
    write_manifest(dir, {{"kind", "align"},
                         {"format_version", 1},
                         {"data", data_dir},
                         {"config", align_config_json(ck.config)},
                         {"steps_per_epoch", ck.steps_per_epoch},
                         {"steps", ck.history.size()},
                         {"teacher_momentum", ck.teacher.momentum},
                         {"label_names", ck.label_names},
                         {"groups", groups}});
}

align::AlignCheckpoint load_align(const fs::path& dir) {
    const json m = read_manifest(dir, "align");
    return guard_manifest(dir, [&] {
        align::AlignCheckpoint ck;
        ck.config = align_config_from(m.at("config"));
        ck.steps_per_epoch = m.at("steps_per_epoch");
        ck.label_names = m.at("label_names").get<std::vector<std::string>>();
        const json& g = m.at("groups");
        ck.encoders.audio = {enc::Modality::audio, false, load_group(dir, "audio", g.at("audio"))};
        ck.encoders.vision = {enc::Modality::vision, true, load_group(dir, "vision", g.at("vision"))};
        ck.encoders.text = {enc::Modality::text, true, load_group(dir, "text", g.at("text"))};
        ck.teacher = {load_group(dir, "teacher", g.at("teacher")), m.at("teacher_momentum").get<double>()};
        return ck;
    });
}

void save_diffusion(const fs::path& dir, const diff::TrainedDiffusion& trained, const diff::DiffusionConfig& c,
                    const std::string& align_dir) {
    const auto& m = trained.model;
    json groups;
    groups["denoiser"] = save_group(dir, "denoiser", m.denoiser);
    groups["text"] = save_group(dir, "text", m.text.params);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < trained.loss_history.size(); ++i) {
        rows.push_back({static_cast<double>(i), trained.loss_history[i]});
    }
    write_file_atomic(dir / "loss.csv", loss_csv({"step", "loss"}, rows));
    write_manifest(dir, {{"kind", "diffusion"},
                         {"format_version", 1},
                         {"align", align_dir},
                         {"config",
                          {{"T", c.T},
                           {"beta_start", c.beta_start},
                           {"beta_end", c.beta_end},
                           {"steps", c.steps},
                           {"batch_size", c.batch_size},
                           {"lr", c.lr},
                           {"seed", c.seed}}},
                         {"shape",
                          {{"token_dim", m.shape.token_dim},
                           {"ch1", m.shape.ch1},
                           {"ch2", m.shape.ch2},
                           {"attn_dim", m.shape.attn_dim},
                           {"time_dim", m.shape.time_dim}}},
                         {"label_names", m.label_names},
                         {"groups", groups}});
}

diff::DiffusionModel load_diffusion(const fs::path& dir) {
    const json j = read_manifest(dir, "diffusion");
    return guard_manifest(dir, [&] {
        diff::DiffusionModel m;
        const json& c = j.at("config");
        m.schedule = diff::NoiseSchedule::linear(c.at("T"), c.at("beta_start"), c.at("beta_end"));
        const json& s = j.at("shape");
        m.shape = {s.at("token_dim"), s.at("ch1"), s.at("ch2"), s.at("attn_dim"), s.at("time_dim")};
        m.label_names = j.at("label_names").get<std::vector<std::string>>();
        m.denoiser = load_group(dir, "denoiser", j.at("groups").at("denoiser"));
        m.text = {enc::Modality::text, true, load_group(dir, "text", j.at("groups").at("text"))};
        return m;
    });
}

std::string encode_token(const adapt::PseudoToken& t, const json& extra) {
    json h = extra.is_object() ? extra : json::object();
    h["kind"] = "pseudo_token";
    h["clip_id"] = t.clip_id;
    h["steps"] = t.steps;
    h["final_loss"] = t.final_loss;
    h["template"] = t.template_prompt;
    h["append_token"] = t.append_token;
    h["loss_history"] = t.loss_history;
    const std::string header = h.dump();
    std::string out = "AAIK";
    put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    out += encode_tensor(t.f_a);
    out += encode_tensor(t.f_adapter);
    return out;
}

adapt::PseudoToken decode_token(const std::string& bytes, json* header) {
    if (bytes.size() < 4 || bytes.compare(0, 4, "AAIK") != 0) {
        throw FormatError("bad pseudo-token magic at byte 0 (expected AAIK)");
    }
    std::size_t offset = 4;
    const auto len = get<std::uint32_t>(bytes, offset, "header length");
    if (bytes.size() - offset < len) {
        throw FormatError("truncated pseudo-token header: " + std::to_string(len) + " bytes expected from byte " +
                          std::to_string(offset) + " but data ends at byte " + std::to_string(bytes.size()));
    }
    json h;
    try {
        h = json::parse(bytes.substr(offset, len));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("pseudo-token header is not JSON: ") + e.what());
    }
    offset += len;
    adapt::PseudoToken t;
    t.f_a = decode_tensor(bytes, offset);
    t.f_adapter = decode_tensor(bytes, offset);
    if (offset != bytes.size()) {
        throw FormatError("trailing bytes after pseudo-token at byte " + std::to_string(offset));
    }
    if (t.f_a.shape() != t.f_adapter.shape() || t.f_a.ndim() != 1) {
        throw FormatError("pseudo-token parts must be equal-length vectors");
    }
    try {
        t.clip_id = h.at("clip_id");
        t.steps = h.at("steps");
        t.final_loss = h.at("final_loss");
        t.template_prompt = h.at("template");
        t.append_token = h.at("append_token");
        t.loss_history = h.at("loss_history").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("pseudo-token header is incomplete: ") + e.what());
    }
    if (header) {
        *header = std::move(h);
    }
    return t;
}

void save_token(const fs::path& path, const adapt::PseudoToken& token, const json& extra) {
    write_file_atomic(path, encode_token(token, extra));
}

adapt::PseudoToken load_token(const fs::path& path, json* header) {
    try {
        return decode_token(read_file(path), header);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string loss_csv(const std::vector<std::string>& columns, const std::vector<std::vector<double>>& rows) {
    std::string out;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        out += (i ? "," : "") + columns[i];
    }
    out += "\n";
    for (const auto& r : rows) {
        require(r.size() == columns.size(), "loss row width does not match the header");
        for (std::size_t i = 0; i < r.size(); ++i) {
            out += (i ? "," : "") + format_double(r[i]);
        }
        out += "\n";
    }
    return out;
}

}  // namespace aai::io
