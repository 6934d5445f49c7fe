#include "aai/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "aai/cliio.hpp"
#include "aai/error.hpp"
#include "aai/evalsuite.hpp"

namespace aai::cli {

namespace {

using nlohmann::json;

struct Common {
    std::string config;
    json flags = json::object();
};

// Registers a flag whose value lands in the flat config under `key`.
template <typename T>
void config_option(CLI::App* sub, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_option_function<T>(flag, [&c, key](const T& v) { c.flags[key] = v; }, help);
}

void common_options(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "Flat JSON config file; flags override its values");
    config_option<std::uint64_t>(sub, c, "--seed", "seed", "Random seed (default: $AAI_SEED, else 7)");
}

io::RunConfig resolve_config(const Common& c) {
    io::RunConfig cfg;
    if (const char* env = std::getenv("AAI_SEED")) {
        char* end = nullptr;
        const unsigned long long s = std::strtoull(env, &end, 10);
        if (!*env || *end || env[0] == '-') {
            throw ArgumentError(std::string("AAI_SEED must be a non-negative integer, got '") + env + "'");
        }
        cfg.apply_seed(s);
    }
    if (!c.config.empty()) {
        if (!io::fs::exists(c.config)) {
            throw ArgumentError("config file not found: " + c.config);
        }
        json flat = json::parse(io::read_file(c.config), nullptr, false);
        if (flat.is_discarded()) {
            throw ArgumentError(c.config + " is not valid JSON");
        }
        cfg.merge(flat);
    }
    for (const auto& [key, value] : c.flags.items()) {
        cfg.set(key, value);
    }
    cfg.validate();
    return cfg;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(prec);
    ss << v;
    return ss.str();
}

std::optional<inject::ReweightSpec> reweight_from(const std::optional<double>& scale, const std::string& index,
                                                  const diff::ConditioningSequence& cond) {
    if (!scale) {
        require(index.empty(), "--reweight-index needs --reweight-scale");
        return std::nullopt;
    }
    inject::ReweightSpec spec;
    spec.scale = *scale;
    const std::string idx = index.empty() ? "STAR" : index;
    std::stringstream ss(idx);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part == "STAR") {
            require(cond.slot_index.has_value(), "--reweight-index STAR needs a prompt with a * slot");
            spec.scale_index.insert(*cond.slot_index);
        } else {
            require(!part.empty() && part.find_first_not_of("0123456789") == std::string::npos,
                    "--reweight-index expects STAR or comma-separated token positions, got '" + idx + "'");
            spec.scale_index.insert(std::stoi(part));
        }
    }
    spec.validate(cond.length());
    return spec;
}

diff::DiffusionModel model_for_token(const std::string& dckpt, const json& header) {
    if (!dckpt.empty()) {
        return io::load_diffusion(dckpt);
    }
    require(header.contains("dckpt") && header["dckpt"].is_string(),
            "the token file does not record its diffusion checkpoint; pass --dckpt");
    return io::load_diffusion(header["dckpt"].get<std::string>());
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Align, adapt and inject: audio-conditioned toy image synthesis", "aai"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    // dataset
    Common c_ds;
    std::string ds_out;
    auto* ds = app.add_subcommand("dataset", "Generate the synthetic tri-modal dataset");
    common_options(ds, c_ds);
    ds->add_option("--out", ds_out, "Output directory")->required();
    config_option<int>(ds, c_ds, "--classes", "num_classes", "Number of classes");
    config_option<int>(ds, c_ds, "--train,--train-per-class", "train_per_class", "Training clips per class");
    config_option<int>(ds, c_ds, "--test,--test-per-class", "test_per_class", "Test clips per class");
    config_option<int>(ds, c_ds, "--frames", "frames", "Frames per clip");
    config_option<double>(ds, c_ds, "--sigma", "noise_sigma", "Gaussian noise standard deviation");

    // train-align
    Common c_al;
    std::string al_data, al_out;
    auto* al = app.add_subcommand("train-align", "Align the audio encoder to the frozen vision/text encoders");
    common_options(al, c_al);
    al->add_option("--data", al_data, "Dataset directory")->required();
    al->add_option("--out", al_out, "Output checkpoint directory")->required();
    config_option<int>(al, c_al, "--dim", "d", "Embedding dimension");
    config_option<double>(al, c_al, "--tau", "tau", "Temperature");
    config_option<double>(al, c_al, "--alpha", "alpha", "Pseudo-target weight");
    config_option<int>(al, c_al, "--batch-size", "batch_size", "Batch size N");
    config_option<int>(al, c_al, "--epochs", "epochs", "Epochs");
    config_option<double>(al, c_al, "--lr", "lr", "Learning rate");
    config_option<double>(al, c_al, "--weight-decay", "weight_decay", "Decoupled weight decay");
    config_option<double>(al, c_al, "--momentum", "momentum", "Teacher EMA momentum");
    al->add_flag_callback(
        "--exclude-positive", [&] { c_al.flags["exclude_positive_denominator"] = true; },
        "Sum only negatives in the contrastive denominator");

    // eval
    Common c_ev;
    std::string ev_data, ev_ckpt, ev_out;
    auto* ev = app.add_subcommand("eval", "Retrieval and zero-shot evaluation on the test split");
    common_options(ev, c_ev);
    ev->add_option("--ckpt", ev_ckpt, "Alignment checkpoint directory")->required();
    ev->add_option("--data", ev_data, "Dataset directory (default: the one recorded in the checkpoint)");
    ev->add_option("--report,--out", ev_out, "Write the JSON report here");

    // train-diffusion
    Common c_df;
    std::string df_data, df_align, df_out;
    auto* df = app.add_subcommand("train-diffusion", "Train the label-conditioned toy diffusion model");
    common_options(df, c_df);
    df->add_option("--ckpt-align", df_align, "Alignment checkpoint (provides the text conditioner)")->required();
    df->add_option("--data", df_data, "Dataset directory (default: the one recorded in the checkpoint)");
    df->add_option("--out", df_out, "Output checkpoint directory")->required();
    config_option<int>(df, c_df, "--T", "T", "Diffusion steps");
    config_option<int>(df, c_df, "--steps", "diffusion_steps", "Optimizer steps");
    config_option<int>(df, c_df, "--batch-size", "diffusion_batch_size", "Batch size");
    config_option<double>(df, c_df, "--lr", "diffusion_lr", "Learning rate");

    // sample
    Common c_sm;
    std::string sm_dckpt, sm_prompt, sm_out, sm_capture;
    auto* sm = app.add_subcommand("sample", "Sample an image from a text prompt");
    common_options(sm, c_sm);
    sm->add_option("--dckpt", sm_dckpt, "Diffusion checkpoint directory")->required();
    sm->add_option("--prompt", sm_prompt, "Prompt, e.g. \"a photo of <label:3>\"")->required();
    sm->add_option("--out", sm_out, "Output PPM")->required();
    sm->add_option("--capture", sm_capture, "Also write the per-step attention maps [T×P×L]");

    // adapt
    Common c_ad;
    std::string ad_dckpt, ad_align, ad_data, ad_out, ad_template;
    int ad_clip = -1;
    auto* ad = app.add_subcommand("adapt", "Optimize an audio adapter into a pseudo-token");
    common_options(ad, c_ad);
    ad->add_option("--dckpt", ad_dckpt, "Diffusion checkpoint directory")->required();
    ad->add_option("--ckpt-align", ad_align, "Alignment checkpoint directory")->required();
    ad->add_option("--audio", ad_clip, "Clip id of the audio to invert")->required();
    ad->add_option("--data", ad_data, "Dataset directory (default: the one recorded in the alignment checkpoint)");
    ad->add_option("--out", ad_out, "Output token file")->required();
    ad->add_option("--template", ad_template, "Adaptation prompt with one * slot")->default_str("a photo of *");
    config_option<int>(ad, c_ad, "--k", "k", "Number of reference images");
    config_option<int>(ad, c_ad, "--steps", "adapt_steps", "Optimizer steps");
    config_option<double>(ad, c_ad, "--lr", "adapt_lr", "Learning rate");
    ad->add_flag_callback(
        "--append-token", [&] { c_ad.flags["append_token"] = true; },
        "Append the pseudo-token after the prompt instead of filling the * slot");

    // generate / edit / stylize share token and injection options
    struct InjectArgs {
        Common common;
        std::string token, dckpt, reweight_index;
        std::optional<double> reweight_scale;
    };
    auto inject_options = [](CLI::App* sub, InjectArgs& a) {
        common_options(sub, a.common);
        sub->add_option("--token", a.token, "Pseudo-token file")->required();
        sub->add_option("--dckpt", a.dckpt, "Diffusion checkpoint (default: the one recorded in the token)");
        sub->add_option_function<double>(
            "--reweight-scale", [&a](const double& v) { a.reweight_scale = v; }, "Attention scale in [0,2]");
        sub->add_option("--reweight-index", a.reweight_index, "STAR or comma-separated token positions");
        sub->add_flag_callback(
            "--no-renorm", [&a] { a.common.flags["renormalize"] = false; },
            "Keep the literal (unnormalized) attention rewrites");
    };

    InjectArgs g;
    std::string g_template, g_out;
    auto* gen = app.add_subcommand("generate", "Generate an image from a prompt containing the pseudo-token");
    inject_options(gen, g);
    gen->add_option("--template", g_template, "Prompt with a * slot (default: the adaptation template)");
    gen->add_option("--out", g_out, "Output PPM")->required();

    InjectArgs e;
    std::string e_source, e_target, e_out_src, e_out_edit;
    bool e_before = false;
    auto* ed = app.add_subcommand("edit", "Sound-guided edit of a source prompt's image");
    inject_options(ed, e);
    ed->add_option("--source", e_source, "Source prompt")->required();
    ed->add_option("--target", e_target, "Target prompt (the source plus a * token)")->required();
    ed->add_option("--out-src", e_out_src, "Output PPM of the source image")->required();
    ed->add_option("--out-edit", e_out_edit, "Output PPM of the edited image")->required();
    config_option<double>(ed, e.common, "--injection-fraction", "injection_fraction",
                          "Fraction of steps with attention injection");
    ed->add_flag("--reweight-before-merge", e_before, "Reweight the target map before the case-split");

    InjectArgs s;
    std::string s_base, s_out_src, s_out;
    auto* st = app.add_subcommand("stylize", "Render a prompt \"in the style of\" the pseudo-token");
    inject_options(st, s);
    st->add_option("--base", s_base, "Base prompt")->required();
    st->add_option("--out", s_out, "Output PPM of the stylized image")->required();
    st->add_option("--out-src", s_out_src, "Also write the un-stylized image");
    config_option<double>(st, s.common, "--injection-fraction", "injection_fraction",
                          "Fraction of steps with attention injection");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        app.exit(ex, out, err);
        return 0;
    } catch (const CLI::CallForAllHelp& ex) {
        app.exit(ex, out, err);
        return 0;
    } catch (const CLI::ParseError& ex) {
        app.exit(ex, out, err);
        if (app.get_subcommands().empty()) {
            err << app.help();
        }
        return 2;
    }

    try {
        if (ds->parsed()) {
            const auto cfg = resolve_config(c_ds);
            synth::DatasetOptions o = cfg.dataset;
            o.seed = cfg.seed;
            const auto data = synth::generate_dataset(o);
            io::save_dataset(ds_out, data);
            out << "dataset: " << data.samples.size() << " clips, " << data.num_classes() << " classes -> " << ds_out
                << "\n";
        } else if (al->parsed()) {
            const auto cfg = resolve_config(c_al);
            const auto data = io::load_dataset(al_data);
            const auto ck = align::train_align(data, cfg.align);
            io::save_align(al_out, ck, al_data);
            const auto em = align::epoch_mean_totals(ck);
            out << "train-align: " << ck.history.size() << " steps";
            if (!em.empty()) {
                out << ", epoch-mean loss " << fmt(em.front()) << " -> " << fmt(em.back());
            }
            out << " -> " << al_out << "\n";
        } else if (ev->parsed()) {
            resolve_config(c_ev);
            const auto ck = io::load_align(ev_ckpt);
            const std::string data_dir =
                ev_data.empty() ? io::read_manifest(ev_ckpt, "align").at("data").get<std::string>() : ev_data;
            const auto data = io::load_dataset(data_dir);
            const auto rep = eval::evaluate(ck, data);
            json j{{"zero_shot_accuracy", rep.zero_shot_accuracy}, {"num_test_clips", rep.num_test_clips}};
            for (const auto* group : {&rep.instance, &rep.by_class}) {
                json rows = json::array();
                for (const auto& r : *group) {
                    json ks = json::object();
                    for (const auto& [k, v] : r.recall_at) {
                        ks[std::to_string(k)] = v;
                    }
                    rows.push_back({{"direction", eval::direction_name(r.direction)},
                                    {"recall_at", ks},
                                    {"num_queries", r.num_queries}});
                }
                j[group == &rep.instance ? "instance" : "by_class"] = rows;
            }
            if (!ev_out.empty()) {
                io::write_file_atomic(ev_out, j.dump(2) + "\n");
            }
            out << "eval: zero-shot " << fmt(rep.zero_shot_accuracy) << ", a2v R@1 (class) "
                << fmt(rep.by_class.front().recall_at.at(1)) << ", a2v R@1 (clip) "
                << fmt(rep.instance.front().recall_at.at(1)) << "\n";
        } else if (df->parsed()) {
            const auto cfg = resolve_config(c_df);
            const auto ck = io::load_align(df_align);
            const std::string data_dir =
                df_data.empty() ? io::read_manifest(df_align, "align").at("data").get<std::string>() : df_data;
            const auto data = io::load_dataset(data_dir);
            const auto trained = diff::train_diffusion(data, ck.encoders.text, cfg.diffusion);
            io::save_diffusion(df_out, trained, cfg.diffusion, df_align);
            out << "train-diffusion: " << trained.loss_history.size() << " steps";
            if (!trained.loss_history.empty()) {
                out << ", final loss " << fmt(trained.loss_history.back());
            }
            out << " -> " << df_out << "\n";
        } else if (sm->parsed()) {
            const auto cfg = resolve_config(c_sm);
            const auto model = io::load_diffusion(sm_dckpt);
            const auto spec = inject::parse_prompt(model, sm_prompt);
            const auto r = diff::sample(model, inject::assemble_conditioning(model, spec), cfg.seed,
                                        !sm_capture.empty());
            io::write_image(sm_out, r.image);
            if (!sm_capture.empty()) {
                std::vector<Tensor> maps;
                for (const auto& rec : r.records) {
                    maps.push_back(rec.maps);
                }
                io::save_tensor(sm_capture, stack(maps));
            }
            out << "sample: " << sm_out << "\n";
        } else if (ad->parsed()) {
            auto cfg = resolve_config(c_ad);
            if (!ad_template.empty()) {
                cfg.adapter.template_prompt = ad_template;
            }
            const auto model = io::load_diffusion(ad_dckpt);
            const auto ck = io::load_align(ad_align);
            const std::string data_dir =
                ad_data.empty() ? io::read_manifest(ad_align, "align").at("data").get<std::string>() : ad_data;
            const auto data = io::load_dataset(data_dir);
            bool found = false;
            for (const auto& smp : data.samples) {
                found = found || smp.clip_id == ad_clip;
            }
            require(found, "--audio: no clip with id " + std::to_string(ad_clip));
            const auto& clip = data.by_clip(ad_clip);
            const Tensor f_a = enc::encode_audio(ck.encoders.audio, clip.audio).vector;
            const auto lib = adapt::build_library(data, ck.encoders.vision);
            const auto idx = adapt::retrieve_indices(f_a, lib, cfg.adapter.k);
            std::vector<Tensor> refs;
            json ref_clips = json::array();
            for (int i : idx) {
                refs.push_back(lib.images[i]);
                ref_clips.push_back(lib.clip_ids[i]);
            }
            const auto tok = adapt::adapt_audio(f_a, refs, model, cfg.adapter, ad_clip);
            io::save_token(ad_out, tok,
                           {{"dckpt", ad_dckpt},
                            {"ckpt_align", ad_align},
                            {"data", data_dir},
                            {"label_id", clip.label_id},
                            {"seed", cfg.adapter.seed},
                            {"k", cfg.adapter.k},
                            {"lr", cfg.adapter.lr},
                            {"reference_indices", idx},
                            {"reference_clip_ids", ref_clips}});
            out << "adapt: clip " << ad_clip << ", " << tok.steps << " steps, final loss " << fmt(tok.final_loss)
                << " -> " << ad_out << "\n";
        } else if (gen->parsed()) {
            const auto cfg = resolve_config(g.common);
            json header;
            const auto tok = io::load_token(g.token, &header);
            const auto model = model_for_token(g.dckpt, header);
            const auto spec = inject::parse_prompt(model, g_template.empty() ? tok.template_prompt : g_template, tok,
                                                   inject::Role::generate, tok.append_token);
            const auto rw = reweight_from(g.reweight_scale, g.reweight_index, inject::assemble_conditioning(model, spec));
            io::write_image(g_out, inject::generate(model, spec, cfg.seed, rw, cfg.renormalize));
            out << "generate: " << g_out << "\n";
        } else if (ed->parsed()) {
            const auto cfg = resolve_config(e.common);
            json header;
            const auto tok = io::load_token(e.token, &header);
            const auto model = model_for_token(e.dckpt, header);
            auto plan = inject::make_edit_plan(
                inject::parse_prompt(model, e_source, tok, inject::Role::edit_source, tok.append_token),
                inject::parse_prompt(model, e_target, tok, inject::Role::edit_target, tok.append_token),
                cfg.injection_fraction);
            plan.renormalize = cfg.renormalize;
            plan.reweight = reweight_from(e.reweight_scale, e.reweight_index,
                                          inject::assemble_conditioning(model, plan.target));
            plan.reweight_order = e_before ? inject::ReweightOrder::before_merge : inject::ReweightOrder::after_merge;
            const auto r = inject::edit(model, plan, cfg.seed);
            io::write_image(e_out_src, r.source);
            io::write_image(e_out_edit, r.edited);
            out << "edit: " << e_out_src << ", " << e_out_edit << "\n";
        } else if (st->parsed()) {
            const auto cfg = resolve_config(s.common);
            json header;
            const auto tok = io::load_token(s.token, &header);
            const auto model = model_for_token(s.dckpt, header);
            auto plan = inject::stylize_plan(model, s_base, tok, cfg.injection_fraction, tok.append_token);
            plan.renormalize = cfg.renormalize;
            plan.reweight = reweight_from(s.reweight_scale, s.reweight_index,
                                          inject::assemble_conditioning(model, plan.target));
            const auto r = inject::edit(model, plan, cfg.seed);
            io::write_image(s_out, r.edited);
            if (!s_out_src.empty()) {
                io::write_image(s_out_src, r.source);
            }
            out << "stylize: " << s_out << "\n";
        }
    } catch (const std::invalid_argument& ex) {
        err << "error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"aai"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    return cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace aai::cli
