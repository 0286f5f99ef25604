#include "gbtsam/cli.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "gbtsam/config.hpp"
#include "gbtsam/error.hpp"
#include "gbtsam/eval.hpp"
#include "gbtsam/model.hpp"
#include "gbtsam/serve.hpp"
#include "gbtsam/training.hpp"

namespace gbtsam {

using nlohmann::json;

namespace {

void write_frozen_config(RunConfig const& config, std::filesystem::path const& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << run_config_to_json(config).dump(2) << "\n";
}

int cmd_synth(RunConfig const& config, std::filesystem::path out_dir, std::ostream& out) {
    if (out_dir.empty()) {
        out_dir = config.run_dir / "data";
    }
    auto const entries = synthesize(config.data, out_dir);
    write_frozen_config(config, out_dir);
    out << "wrote " << entries.size() << " phantoms to " << (out_dir / "manifest.json").string() << "\n";
    return 0;
}

std::filesystem::path run_pretrain(RunConfig const& config, std::ostream& out) {
    SamModel model(config.model);
    std::filesystem::create_directories(config.run_dir);
    std::ofstream log(config.run_dir / "pretrain_metrics.ndjson", std::ios::trunc);
    auto summary = pretrain_model(model, config.pretrain,
                                  [&](MetricRecord const& r) { log << r.to_json().dump() << "\n"; });
    auto const path = config.run_dir / "pretrain.ckpt";
    save_checkpoint(model, path,
                    json{{"phase", "pretrain"}, {"steps", config.pretrain.steps}, {"seed", config.pretrain.seed}});
    out << "pretrain: " << summary.records.size() << " steps";
    if (!summary.records.empty()) {
        out << ", final loss " << summary.records.back().loss;
    }
    out << "\n" << path.string() << "\n";
    return path;
}

int cmd_pretrain(RunConfig const& config, std::ostream& out) {
    write_frozen_config(config, config.run_dir);
    run_pretrain(config, out);
    return 0;
}

int cmd_train(RunConfig config, std::ostream& out) {
    write_frozen_config(config, config.run_dir);
    auto const samples = build_dataset(config.data);
    auto const train_set = training_split(samples, config.data);
    if (train_set.empty()) {
        throw ConfigError("no training volumes: check data.phantoms, data.train_domains and data.train_fraction");
    }
    TrainRequest req;
    req.model = config.model;
    req.train = config.train;
    req.run_dir = config.run_dir;
    req.phase = config.train_phase;
    req.step1_checkpoint = config.step1_checkpoint;
    req.base_checkpoint = config.base_checkpoint;
    if (!req.base_checkpoint && config.pretrain.steps > 0 && config.train_phase != "step2") {
        req.base_checkpoint = run_pretrain(config, out);
    }
    auto const outcome = train(req, train_set);
    out << "trained " << outcome.total_steps << " steps on " << train_set.size() << " volumes";
    if (outcome.skipped_shallow > 0) {
        out << " (" << outcome.skipped_shallow << " shallow draws skipped)";
    }
    out << ", final loss " << outcome.final_loss << "\n";
    for (auto const& p : outcome.checkpoints) {
        out << p.string() << "\n";
    }
    return 0;
}

int cmd_eval(RunConfig const& config, std::filesystem::path const& checkpoint, std::ostream& out) {
    auto ck = load_checkpoint(checkpoint);
    write_frozen_config(config, config.run_dir);
    auto const samples = build_dataset(config.data);
    auto const eval_set = evaluation_split(samples);
    if (eval_set.empty()) {
        throw ConfigError("no evaluation volumes: every configured volume is in the training split");
    }
    std::vector<DiceReport> reports;
    for (std::size_t s = 0; s < config.eval.seeds; ++s) {
        EvalOptions opts;
        opts.regime = PromptRegime::parse(config.eval.regime);
        opts.threshold = config.eval.threshold;
        opts.seed = config.eval.seed + s;
        opts.threads = config.eval.threads;
        auto report = evaluate(ck.model, eval_set, opts);
        report.modality_subset = config.data.modality_subset;
        reports.push_back(std::move(report));
    }
    std::ofstream(config.run_dir / "report.json") << reports.front().to_json().dump(2) << "\n";
    if (reports.size() > 1) {
        json all = json::array();
        for (auto const& r : reports) {
            all.push_back(r.to_json());
        }
        std::ofstream(config.run_dir / "report_seeds.json") << all.dump(2) << "\n";
    }
    out << "checkpoint " << ck.id << ", " << eval_set.size() << " volumes\n" << format_table(reports);
    return 0;
}

int cmd_serve(RunConfig const& config, std::filesystem::path const& checkpoint, std::ostream& out) {
    auto ck = load_checkpoint(checkpoint);
    SegmentService service(std::move(ck.model), ck.id, config.eval.threshold);
    HttpServer server(service, config.serve.threads);
    int const port = server.bind(config.serve.host, config.serve.port);
    out << "listening on http://" << config.serve.host << ":" << port << " (checkpoint " << service.checkpoint_id()
        << ")" << std::endl;
    server.listen();
    return 0;
}

} // namespace

int run_cli(int argc, char const* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"gbtsam: promptable volumetric segmentation with 4-modality adaptation"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--set", overrides, "override a config value, e.g. --set train.delta=4");
    };

    std::string out_dir;
    auto* synth = app.add_subcommand("synth", "write synthetic phantom volumes and a manifest");
    add_common(synth);
    synth->add_option("-o,--out", out_dir, "output directory (default: <run_dir>/data)");

    auto* pretrain = app.add_subcommand("pretrain", "fit foundation weights on generic synthetic scenes");
    add_common(pretrain);

    std::string phase;
    std::string step1_checkpoint;
    std::string base_checkpoint;
    auto* train_cmd = app.add_subcommand("train", "run the adaptation phases");
    add_common(train_cmd);
    train_cmd->add_option("--phase", phase, "step1, step2 or both");
    train_cmd->add_option("--step1-checkpoint", step1_checkpoint, "phase-1 checkpoint for --phase step2");
    train_cmd->add_option("--base-checkpoint", base_checkpoint, "foundation weights");

    std::string checkpoint;
    auto* eval_cmd = app.add_subcommand("eval", "Dice report over held-out and unseen-domain volumes");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
    add_common(serve_cmd);
    serve_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (CLI::ParseError const& e) {
        int const code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        auto config = load_run_config(config_path, overrides);
        if (!phase.empty()) {
            if (phase != "both" && phase != "step1" && phase != "step2") {
                throw ConfigError("--phase must be step1, step2 or both");
            }
            config.train_phase = phase;
        }
        if (!step1_checkpoint.empty()) {
            config.step1_checkpoint = step1_checkpoint;
        }
        if (!base_checkpoint.empty()) {
            config.base_checkpoint = base_checkpoint;
        }
        if (synth->parsed()) {
            return cmd_synth(config, out_dir, out);
        }
        if (pretrain->parsed()) {
            return cmd_pretrain(config, out);
        }
        if (train_cmd->parsed()) {
            return cmd_train(config, out);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(config, checkpoint, out);
        }
        return cmd_serve(config, checkpoint, out);
    } catch (TrainingAborted const& e) {
        err << "training aborted: " << e.what() << "\n";
        return 1;
    } catch (Error const& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (std::exception const& e) {
        err << "internal error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace gbtsam
