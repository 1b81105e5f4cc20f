// cfm: command-line front end for the DTC event-stream pipeline.
//
// Subcommands: gen-data, pretrain, train-ep, eval-pretrain, eval-ep, curves,
// ablate. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
// failure, 5 insufficient context. Set CF_DETERMINISTIC=1 for byte-stable
// artifacts.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "carformer/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config_or_empty(const std::string& path) {
    if (path.empty()) return json::object();
    return cf::load_json_file(path);
}

cf::TrainConfig train_config_from(const json& j, int steps_override, std::uint64_t seed,
                                  bool seed_set) {
    cf::TrainConfig t = cf::TrainConfig::from_json(j);
    if (steps_override > 0) {
        t.total_steps = steps_override;
        if (t.warmup_steps >= t.total_steps) t.warmup_steps = t.total_steps / 10;
    }
    if (seed_set) t.seed = seed;
    return t;
}

void write_loss_log(const std::vector<cf::TrainLogEntry>& log, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw cf::DataError("cannot write " + path);
    f << "step,loss,lr\n";
    for (const auto& e : log)
        f << e.step << "," << cf::format_double(e.loss) << ","
          << cf::format_double(e.lr) << "\n";
}

void write_epoch_log(const cf::EpTrainResult& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw cf::DataError("cannot write " + path);
    f << "epoch,train_loss,val_loss\n";
    for (std::size_t i = 0; i < r.train_loss_per_epoch.size(); ++i)
        f << i << "," << cf::format_double(r.train_loss_per_epoch[i]) << ","
          << cf::format_double(r.val_loss_per_epoch[i]) << "\n";
}

struct CommonTrainArgs {
    std::string data_dir;
    std::string config_path;
    std::string train_config_path;
    std::string out_dir;
    int steps = 0;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 int n_sequences, std::uint64_t seed, bool seed_set) {
    json cfg = load_config_or_empty(config_path);
    if (seed_set) cfg["seed"] = seed;
    cf::GeneratorConfig gcfg = cf::build_generator_config(cfg);
    cf::ResampleConfig rcfg;
    if (cfg.contains("resample")) {
        const json& r = cfg["resample"];
        rcfg.theta1 = r.value("theta1", rcfg.theta1);
        rcfg.theta2 = r.value("theta2", rcfg.theta2);
        rcfg.min_count = r.value("min_count", rcfg.min_count);
        rcfg.injection_p = r.value("injection_p", rcfg.injection_p);
        rcfg.seed = r.value("seed", rcfg.seed);
    }
    int n = n_sequences > 0 ? n_sequences : cfg.value("n_sequences", 600);

    cf::Dataset ds = cf::generate_dataset(gcfg, n, rcfg);
    cf::save_dataset(ds, out_dir);

    cf::RunManifest m;
    m.command = "gen-data";
    m.config_path = config_path;
    m.resolved_config = ds.meta;
    m.seed = gcfg.seed;
    if (!config_path.empty()) m.add_input(config_path);
    for (const char* f : {"vocab.json", "train.jsonl", "val.jsonl", "test.jsonl", "meta.json"})
        m.add_output(out_dir + "/" + f);
    m.save(out_dir + "/manifest.json");
    std::cout << "gen-data: " << ds.train.size() << " train / " << ds.val.size()
              << " val / " << ds.test.size() << " test sequences, " << ds.n_labels
              << " labels -> " << out_dir << "\n";
    return 0;
}

int cmd_pretrain(const CommonTrainArgs& a) {
    cf::Dataset ds = cf::load_dataset(a.data_dir);
    json mj = load_config_or_empty(a.config_path);
    if (!mj.contains("vocab_size")) mj["vocab_size"] = ds.vocab.size();
    cf::CarFormerConfig mcfg = cf::CarFormerConfig::from_json(mj);
    if (mcfg.vocab_size != ds.vocab.size())
        throw cf::ConfigError("model vocab_size does not match the dataset vocabulary");
    cf::TrainConfig tcfg = train_config_from(load_config_or_empty(a.train_config_path),
                                             a.steps, a.seed, a.seed_set);

    cf::CarFormer model(mcfg);
    cf::PretrainResult res = cf::run_pretrain(model, ds.train, tcfg,
        [](const cf::TrainLogEntry& e) {
            std::cout << "step " << e.step << " loss " << e.loss << " lr " << e.lr << "\n";
        });

    fs::create_directories(a.out_dir);
    std::string ckpt = a.out_dir + "/pretrain.ckpt";
    cf::save_backbone_checkpoint(ckpt, model,
                                 json{{"train_config", tcfg.to_json()},
                                      {"final_loss", res.final_loss}});
    write_loss_log(res.log, a.out_dir + "/loss_log.csv");

    cf::RunManifest m;
    m.command = "pretrain";
    m.config_path = a.config_path;
    m.resolved_config = {{"model", mcfg.to_json()}, {"train", tcfg.to_json()}};
    m.seed = tcfg.seed;
    m.add_input(a.data_dir + "/train.jsonl");
    m.add_input(a.data_dir + "/vocab.json");
    m.add_output(ckpt);
    m.add_output(a.out_dir + "/loss_log.csv");
    m.save(a.out_dir + "/manifest.json");
    std::cout << "pretrain: loss " << res.initial_loss << " -> " << res.final_loss
              << ", checkpoint " << ckpt << "\n";
    return 0;
}

int cmd_train_ep(const CommonTrainArgs& a, const std::string& backbone_path,
                 bool unfreeze) {
    cf::Dataset ds = cf::load_dataset(a.data_dir);
    cf::Checkpoint bck = cf::Checkpoint::load(backbone_path);
    cf::CarFormer backbone = cf::load_backbone(bck);
    json ej = load_config_or_empty(a.config_path);
    if (!ej.contains("n_labels")) ej["n_labels"] = ds.n_labels;
    if (!ej.contains("d_model")) ej["d_model"] = backbone.config().d_model;
    cf::EPredictorConfig ecfg = cf::EPredictorConfig::from_json(ej);
    if (ecfg.d_model != backbone.config().d_model)
        throw cf::ConfigError("decoder d_model does not match the backbone");
    cf::TrainConfig tcfg = train_config_from(load_config_or_empty(a.train_config_path),
                                             0, a.seed, a.seed_set);
    if (a.steps > 0) tcfg.max_epochs = a.steps;

    cf::EPredictor dec(ecfg);
    cf::EpTrainResult res = cf::run_ep_train(backbone, dec, ds.train, ds.val, tcfg,
        !unfreeze, [](int epoch, double tr, double va) {
            std::cout << "epoch " << epoch << " train " << tr << " val " << va << "\n";
        });

    fs::create_directories(a.out_dir);
    std::string ckpt = a.out_dir + "/ep.ckpt";
    cf::save_ep_checkpoint(ckpt, backbone, dec,
                           json{{"train_config", tcfg.to_json()},
                                {"best_epoch", res.best_epoch},
                                {"backbone_checkpoint", backbone_path}});
    write_epoch_log(res, a.out_dir + "/epoch_log.csv");

    cf::RunManifest m;
    m.command = "train-ep";
    m.config_path = a.config_path;
    m.resolved_config = {{"model", ecfg.to_json()}, {"train", tcfg.to_json()}};
    m.seed = tcfg.seed;
    m.add_input(backbone_path);
    m.add_input(a.data_dir + "/train.jsonl");
    m.add_output(ckpt);
    m.add_output(a.out_dir + "/epoch_log.csv");
    m.save(a.out_dir + "/manifest.json");
    std::cout << "train-ep: best epoch " << res.best_epoch << ", checkpoint " << ckpt
              << "\n";
    return 0;
}

int cmd_eval_pretrain(const std::string& ckpt_path, const std::string& data_path,
                      const std::string& out_path) {
    cf::Checkpoint ck = cf::Checkpoint::load(ckpt_path);
    cf::CarFormer model = cf::load_backbone(ck);
    fs::path dp(data_path);
    std::string vocab_path = (fs::is_directory(dp) ? dp : dp.parent_path()) / "vocab.json";
    std::string data_file = fs::is_directory(dp) ? (dp / "test.jsonl").string() : data_path;
    cf::Vocabulary vocab = cf::Vocabulary::load(vocab_path);
    auto data = cf::load_jsonl(data_file, vocab);

    cf::PretrainEvalReport rep = cf::eval_pretrain(model, data);
    json out = rep.to_json();
    out["checkpoint"] = ckpt_path;
    out["data"] = data_file;
    if (!out_path.empty()) {
        cf::write_json_file(out, out_path);
        cf::RunManifest m;
        m.command = "eval-pretrain";
        m.resolved_config = {{"checkpoint", ckpt_path}, {"data", data_file}};
        m.add_input(ckpt_path);
        m.add_input(data_file);
        m.add_output(out_path);
        m.save(out_path + ".manifest.json");
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_eval_ep(const std::string& ckpt_path, const std::string& data_path, double theta,
                double delta, const std::string& curves_dir, const std::string& out_path) {
    cf::Checkpoint ck = cf::Checkpoint::load(ckpt_path);
    cf::CarFormer backbone = cf::load_backbone(ck);
    cf::EPredictor dec = cf::load_decoder(ck);
    fs::path dp(data_path);
    std::string vocab_path = (fs::is_directory(dp) ? dp : dp.parent_path()) / "vocab.json";
    std::string data_file = fs::is_directory(dp) ? (dp / "test.jsonl").string() : data_path;
    cf::Vocabulary vocab = cf::Vocabulary::load(vocab_path);
    auto data = cf::load_jsonl(data_file, vocab);

    cf::EpEvalReport rep = cf::eval_ep(backbone, dec, data, theta, delta);
    json out = rep.to_json();
    out["checkpoint"] = ckpt_path;
    out["data"] = data_file;
    out["theta"] = theta;
    out["delta"] = delta;

    cf::RunManifest m;
    m.command = "eval-ep";
    m.resolved_config = {{"checkpoint", ckpt_path},
                         {"data", data_file},
                         {"theta", theta},
                         {"delta", delta}};
    m.add_input(ckpt_path);
    m.add_input(data_file);
    if (!curves_dir.empty()) {
        fs::create_directories(curves_dir);
        cf::save_curve_csv(rep.f1_curve, curves_dir + "/f1_curve.csv");
        cf::save_curve_csv(rep.mae_curve, curves_dir + "/mae_curve.csv");
        cf::write_json_file(cf::cpmw_to_json(rep.cpmw_f1), curves_dir + "/cpmw.json");
        m.add_output(curves_dir + "/f1_curve.csv");
        m.add_output(curves_dir + "/mae_curve.csv");
        m.add_output(curves_dir + "/cpmw.json");
    }
    if (!out_path.empty()) {
        cf::write_json_file(out, out_path);
        m.add_output(out_path);
        m.save(out_path + ".manifest.json");
    } else if (!curves_dir.empty()) {
        m.save(curves_dir + "/manifest.json");
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

// Trains one EP variant briefly and evaluates it; used by ablate.
json run_one_ep_variant(const cf::Dataset& ds, cf::CarFormer& backbone,
                        const std::string& variant, const cf::TrainConfig& tcfg,
                        double theta, double delta) {
    cf::EPredictorConfig ecfg;
    ecfg.n_labels = ds.n_labels;
    ecfg.d_model = backbone.config().d_model;
    ecfg.variant = cf::ep_variant_from_string(variant);
    cf::EPredictor dec(ecfg);
    cf::run_ep_train(backbone, dec, ds.train, ds.val, tcfg);
    cf::EpEvalReport rep = cf::eval_ep(backbone, dec, ds.test, theta, delta);
    json row = {{"variant", variant},
                {"f1", rep.micro_f1_final},
                {"mape_pct", rep.mape_pct},
                {"mae_h", rep.mae_h}};
    if (rep.cpmw_f1.has_window) {
        row["cpmwauc_up"] = rep.cpmw_f1.cpmwauc_normalized;
        row["cpmwauc_down"] = rep.cpmwauc_mae_norm;
    } else {
        row["cpmwauc_up"] = nullptr;
        row["cpmwauc_down"] = nullptr;
    }
    return row;
}

json run_one_car_variant(const cf::Dataset& ds, const std::string& variant,
                         const cf::TrainConfig& tcfg) {
    cf::CarFormerConfig mcfg;
    mcfg.vocab_size = ds.vocab.size();
    mcfg.variant = cf::car_variant_from_string(variant);
    cf::CarFormer model(mcfg);
    cf::run_pretrain(model, ds.train, tcfg);
    cf::PretrainEvalReport rep = cf::eval_pretrain(model, ds.test);
    return {{"variant", variant},
            {"acc", rep.accuracy},
            {"mape_pct", rep.mape_pct},
            {"rmse", rep.rmse_scaled}};
}

void print_table(const json& rows) {
    std::vector<std::string> cols;
    for (auto& [k, v] : rows.front().items())
        if (k != "variant") cols.push_back(k);
    std::printf("%-36s", "variant");
    for (const auto& c : cols) std::printf("  %12s", c.c_str());
    std::printf("\n");
    for (const auto& r : rows) {
        std::printf("%-36s", r["variant"].get<std::string>().c_str());
        for (const auto& c : cols) {
            if (r[c].is_null())
                std::printf("  %12s", "-");
            else
                std::printf("  %12.4f", r[c].get<double>());
        }
        std::printf("\n");
    }
}

int cmd_ablate(const std::string& data_dir, const std::string& model_kind,
               std::vector<std::string> variants, const std::string& backbone_path,
               const std::string& train_config_path, const std::string& out_dir,
               double theta, double delta, int steps, std::uint64_t seed, bool seed_set) {
    cf::Dataset ds = cf::load_dataset(data_dir);
    cf::TrainConfig tcfg = train_config_from(load_config_or_empty(train_config_path),
                                             steps, seed, seed_set);
    json rows = json::array();
    if (model_kind == "ep") {
        if (backbone_path.empty())
            throw cf::ConfigError("ablate ep needs --backbone");
        if (variants.empty())
            variants = {"rotnocross-ce-1-2", "rotcross-key-value-ce-2",
                        "rotcross-key-value-scaled-ce-2", "cross-mixffn"};
        cf::Checkpoint bck = cf::Checkpoint::load(backbone_path);
        for (const auto& v : variants) {
            cf::CarFormer backbone = cf::load_backbone(bck);
            std::cout << "ablate: training " << v << "\n";
            rows.push_back(run_one_ep_variant(ds, backbone, v, tcfg, theta, delta));
        }
    } else if (model_kind == "car") {
        if (variants.empty())
            variants = {"rot-ce", "time", "time-mileage", "gpt"};
        for (const auto& v : variants) {
            std::cout << "ablate: training " << v << "\n";
            rows.push_back(run_one_car_variant(ds, v, tcfg));
        }
    } else {
        throw cf::ConfigError("ablate: --model must be car or ep");
    }
    print_table(rows);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        cf::write_json_file(rows, out_dir + "/ablation.json");
        cf::RunManifest m;
        m.command = "ablate";
        m.resolved_config = {{"model", model_kind},
                             {"variants", variants},
                             {"train", tcfg.to_json()}};
        m.seed = tcfg.seed;
        m.add_output(out_dir + "/ablation.json");
        m.save(out_dir + "/manifest.json");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DTC event-stream modeling pipeline"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, backbone_path, train_config_path,
        curves_dir, model_kind = "ep";
    std::vector<std::string> variants;
    int n_sequences = 0, steps = 0;
    std::uint64_t seed = 0;
    double theta = 0.7, delta = 8.0;
    bool unfreeze = false;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic fleet dataset");
    gen->add_option("--config", config_path, "generator config (JSON)");
    gen->add_option("--out", out_path, "output directory")->required();
    gen->add_option("--n", n_sequences, "number of sequences");
    auto* gen_seed = gen->add_option("--seed", seed, "generator seed");

    auto* pre = app.add_subcommand("pretrain", "pretrain the encoder");
    pre->add_option("--data", data_path, "dataset directory")->required();
    pre->add_option("--config", config_path, "model config (JSON)");
    pre->add_option("--train-config", train_config_path, "training config (JSON)");
    pre->add_option("--out", out_path, "output directory")->required();
    pre->add_option("--steps", steps, "override total optimizer steps");
    auto* pre_seed = pre->add_option("--seed", seed, "training seed");

    auto* tep = app.add_subcommand("train-ep", "train the error-pattern decoder");
    tep->add_option("--data", data_path, "dataset directory")->required();
    tep->add_option("--backbone", backbone_path, "pretrained checkpoint")->required();
    tep->add_option("--config", config_path, "decoder config (JSON)");
    tep->add_option("--train-config", train_config_path, "training config (JSON)");
    tep->add_option("--out", out_path, "output directory")->required();
    tep->add_option("--epochs", steps, "override max epochs");
    tep->add_flag("--unfreeze", unfreeze, "fine-tune the backbone too");
    auto* tep_seed = tep->add_option("--seed", seed, "training seed");

    auto* evp = app.add_subcommand("eval-pretrain", "next-event metrics on a dataset");
    evp->add_option("--ckpt", backbone_path, "checkpoint")->required();
    evp->add_option("--data", data_path, "JSONL file or dataset directory")->required();
    evp->add_option("--out", out_path, "report JSON path");

    auto* eve = app.add_subcommand("eval-ep", "error-pattern metrics and CPMW report");
    eve->add_option("--ckpt", backbone_path, "checkpoint")->required();
    eve->add_option("--data", data_path, "JSONL file or dataset directory")->required();
    eve->add_option("--theta", theta, "confidence threshold");
    eve->add_option("--delta", delta, "window extension past the mean length");
    eve->add_option("--emit-curves", curves_dir, "directory for curve CSV/JSON files");
    eve->add_option("--out", out_path, "report JSON path");

    auto* cur = app.add_subcommand("curves", "emit metric curves for a checkpoint");
    cur->add_option("--ckpt", backbone_path, "checkpoint")->required();
    cur->add_option("--data", data_path, "JSONL file or dataset directory")->required();
    cur->add_option("--theta", theta, "confidence threshold");
    cur->add_option("--delta", delta, "window extension past the mean length");
    cur->add_option("--out", curves_dir, "output directory")->required();

    auto* abl = app.add_subcommand("ablate", "run a list of variants and compare");
    abl->add_option("--data", data_path, "dataset directory")->required();
    abl->add_option("--model", model_kind, "car or ep");
    abl->add_option("--variants", variants, "variant names")->delimiter(',');
    abl->add_option("--backbone", backbone_path, "pretrained checkpoint (ep)");
    abl->add_option("--train-config", train_config_path, "training config (JSON)");
    abl->add_option("--out", out_path, "output directory");
    abl->add_option("--theta", theta, "confidence threshold");
    abl->add_option("--delta", delta, "window extension past the mean length");
    abl->add_option("--steps", steps, "override steps (car) or epochs (ep)");
    auto* abl_seed = abl->add_option("--seed", seed, "training seed");

    CLI11_PARSE(app, argc, argv);

    try {
        CommonTrainArgs a{data_path, config_path, train_config_path, out_path, steps,
                          seed, false};
        if (gen->parsed())
            return cmd_gen_data(config_path, out_path, n_sequences, seed,
                                gen_seed->count() > 0);
        if (pre->parsed()) {
            a.seed_set = pre_seed->count() > 0;
            return cmd_pretrain(a);
        }
        if (tep->parsed()) {
            a.seed_set = tep_seed->count() > 0;
            return cmd_train_ep(a, backbone_path, unfreeze);
        }
        if (evp->parsed()) return cmd_eval_pretrain(backbone_path, data_path, out_path);
        if (eve->parsed())
            return cmd_eval_ep(backbone_path, data_path, theta, delta, curves_dir,
                               out_path);
        if (cur->parsed())
            return cmd_eval_ep(backbone_path, data_path, theta, delta, curves_dir, "");
        if (abl->parsed())
            return cmd_ablate(data_path, model_kind, variants, backbone_path,
                              train_config_path, out_path, theta, delta, steps, seed,
                              abl_seed->count() > 0);
    } catch (const cf::ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const cf::ContextError& e) {
        std::cerr << "error: context: " << e.what() << "\n";
        return 5;
    } catch (const cf::NumericError& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
        return 4;
    } catch (const cf::DataError& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
