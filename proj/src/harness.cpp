#include "splitens/harness.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "splitens/inference.hpp"

namespace splitens {

namespace fs = std::filesystem;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f.good()) throw std::runtime_error("cannot write " + path);
    f << text;
}

Dataset load_split(const DatasetCfg& d, bool train_split) {
    if (d.kind == "blobs") {
        BlobsCfg b = d.blobs;
        if (!train_split) {
            b.per_class = d.blobs_test_per_class;
            b.seed = mix_seed(d.blobs.seed, 0x7e57);  // disjoint draw for the test split
        }
        return gen_blobs(b);
    }
    if (d.kind == "cifar_bin")
        return load_cifar_bin(train_split ? d.train_paths : d.test_paths, d.classes, d.channels,
                              d.height, d.width, d.label_bytes);
    if (d.kind == "image_dir")
        return train_split ? load_image_dir(d.train_dir, d.train_labels)
                           : load_image_dir(d.test_dir, d.test_labels);
    if (d.kind == "file") return load_dataset(train_split ? d.train_file : d.test_file);
    throw std::invalid_argument("unknown dataset kind: " + d.kind);
}

struct LoadedRun {
    ExperimentConfig cfg;
    std::vector<Checkpoint> members;  // 1 unless naive ensemble
};

LoadedRun load_run(const std::string& run_dir) {
    LoadedRun run;
    run.cfg = load_config_file(run_dir + "/resolved_config.json");
    if (run.cfg.baseline == "naive_ensemble") {
        const int m = run.cfg.ensemble_size > 0 ? run.cfg.ensemble_size
                                                : run.cfg.subtasks.n_splits;
        for (int i = 0; i < m; ++i)
            run.members.push_back(
                load_checkpoint(run_dir + "/model_" + std::to_string(i) + ".ckpt"));
    } else {
        run.members.push_back(load_checkpoint(run_dir + "/model.ckpt"));
    }
    return run;
}

std::vector<double> scores_for(LoadedRun& run, const Dataset& ds) {
    std::vector<double> scores;
    scores.reserve(ds.size());
    const int batch = 256;
    for (int start = 0; start < ds.size(); start += batch) {
        const int end = std::min(ds.size(), start + batch);
        Tensor x(end - start, ds.images.c, ds.images.h, ds.images.w);
        for (int i = start; i < end; ++i)
            std::copy_n(ds.images.sample(i), ds.images.shape().features(), x.sample(i - start));

        if (run.cfg.baseline == "split_ensemble") {
            auto logits = run.members[0].model.forward(x, ForwardMode::infer);
            for (const auto& out : predict_batch(run.members[0].model.subtask_spec, logits))
                scores.push_back(out.uncertainty_score);
        } else {
            // single model: MSP; naive ensemble: MSP of mean logits
            std::vector<Tensor> all;
            for (auto& member : run.members)
                all.push_back(member.model.forward(x, ForwardMode::infer)[0]);
            const int width = all[0].shape().features();
            std::vector<double> row(width);
            for (int i = 0; i < x.n; ++i) {
                for (int j = 0; j < width; ++j) {
                    double s = 0.0;
                    for (auto& t : all) s += t.at2(i, j);
                    row[j] = s / static_cast<double>(all.size());
                }
                scores.push_back(max_softmax_probability(row));
            }
        }
    }
    return scores;
}

double accuracy_for(LoadedRun& run, const Dataset& ds) {
    int correct = 0;
    const int batch = 256;
    for (int start = 0; start < ds.size(); start += batch) {
        const int end = std::min(ds.size(), start + batch);
        Tensor x(end - start, ds.images.c, ds.images.h, ds.images.w);
        for (int i = start; i < end; ++i)
            std::copy_n(ds.images.sample(i), ds.images.shape().features(), x.sample(i - start));

        if (run.cfg.baseline == "split_ensemble") {
            auto logits = run.members[0].model.forward(x, ForwardMode::infer);
            auto outs = predict_batch(run.members[0].model.subtask_spec, logits);
            for (int i = start; i < end; ++i)
                correct += outs[i - start].predicted_class == ds.labels[i] ? 1 : 0;
        } else {
            std::vector<Tensor> all;
            for (auto& member : run.members)
                all.push_back(member.model.forward(x, ForwardMode::infer)[0]);
            const int width = all[0].shape().features();
            for (int i = start; i < end; ++i) {
                int arg = 0;
                double best = -1e300;
                for (int j = 0; j < width; ++j) {
                    double s = 0.0;
                    for (auto& t : all) s += t.at2(i - start, j);
                    if (s > best) {
                        best = s;
                        arg = j;
                    }
                }
                correct += arg == ds.labels[i] ? 1 : 0;
            }
        }
    }
    return ds.size() > 0 ? static_cast<double>(correct) / ds.size() : 0.0;
}

}  // namespace

std::string resolve_output_dir(const std::string& dir) {
    if (!dir.empty() && dir.front() == '/') return dir;
    if (const char* root = std::getenv("SPLITENS_OUT_ROOT"))
        return std::string(root) + "/" + dir;
    return dir;
}

namespace {

Dataset load_ood_set(const OodSetCfg& o, const ExperimentConfig& cfg, const Shape& img) {
    if (o.kind == "gaussian") return gen_noise_ood(NoiseKind::gaussian, img, o.count, o.seed);
    if (o.kind == "uniform") return gen_noise_ood(NoiseKind::uniform, img, o.count, o.seed);
    if (o.kind == "blobs_ood") {
        BlobsCfg b = cfg.dataset.blobs;
        b.seed = mix_seed(b.seed, 0xb10b, o.seed);
        if (o.angle_deg > -2.0) b.ood_angle_deg = o.angle_deg;
        if (o.radius_frac >= 0.0) b.ring_radius_frac = o.radius_frac;
        return gen_blobs_ood(b, o.count);
    }
    if (o.kind == "file") return load_dataset(o.path);
    throw std::invalid_argument("unknown OOD set kind: " + o.kind);
}

}  // namespace

LoadedData load_data(const ExperimentConfig& cfg, bool load_ood) {
    LoadedData data;
    data.train = load_split(cfg.dataset, true);
    data.test = load_split(cfg.dataset, false);
    if (!load_ood) return data;
    const Shape img = data.test.shape();
    for (const OodSetCfg& o : cfg.ood_sets)
        data.ood_sets.emplace_back(o.name, load_ood_set(o, cfg, img));
    return data;
}

SubtaskSpec build_subtask_spec(const ExperimentConfig& cfg, const Dataset& train) {
    GroupingOptions opts;
    opts.n_splits = cfg.subtasks.n_splits;
    opts.seed = cfg.subtasks.seed;
    if (cfg.subtasks.strategy == "random") {
        opts.strategy = GroupingStrategy::random;
    } else if (cfg.subtasks.strategy == "explicit") {
        opts.strategy = GroupingStrategy::explicit_groups;
        opts.explicit_list = cfg.subtasks.groups;
    } else if (cfg.subtasks.strategy == "semantic") {
        opts.strategy = GroupingStrategy::semantic;
        opts.semantic_table = cfg.subtasks.semantic_table;
        if (!cfg.subtasks.semantic_table_path.empty()) {
            std::ifstream f(cfg.subtasks.semantic_table_path);
            if (!f.good())
                throw std::runtime_error("cannot open semantic table " +
                                         cfg.subtasks.semantic_table_path);
            json t;
            f >> t;
            for (const auto& [key, value] : t.items())
                opts.semantic_table[std::stoi(key)] = value.get<std::string>();
        }
    } else {
        throw std::invalid_argument("unknown grouping strategy: " + cfg.subtasks.strategy);
    }
    return group_classes(train.classes, opts, train.mean_per_class_count());
}

TrainOutcome cmd_train(const ExperimentConfig& cfg_in) {
    ExperimentConfig cfg = cfg_in;
    cfg.validate();
    const std::string run_dir = resolve_output_dir(cfg.output_dir);
    fs::create_directories(run_dir);

    LoadedData data = load_data(cfg, false);
    const Shape input = data.train.shape();

    write_text(run_dir + "/resolved_config.json", cfg.to_json().dump(2) + "\n");
    std::ofstream events(run_dir + "/events.jsonl");
    EventSink sink = [&events](const json& line) { events << line.dump() << "\n"; };

    TrainOutcome outcome;
    outcome.run_dir = run_dir;

    if (cfg.baseline == "naive_ensemble") {
        // M independent copies of the plain classifier, same pipeline.
        const int m = cfg.ensemble_size > 0 ? cfg.ensemble_size : cfg.subtasks.n_splits;
        SubtaskSpec one;
        one.total_classes = data.train.classes;
        one.groups = {std::vector<int>(data.train.classes)};
        std::iota(one.groups[0].begin(), one.groups[0].end(), 0);
        one.per_class_count = data.train.mean_per_class_count();
        for (int k = 0; k < m; ++k) {
            TrainConfig tc = cfg.train;
            tc.seed = mix_seed(cfg.train.seed, 0xe5b, static_cast<uint64_t>(k));
            TreeModel model = TreeModel::init_shared(cfg.backbone, one, input, tc.seed,
                                                     {data.train.classes});
            TrainState state;
            EventSink member_sink = [&](const json& line) {
                json tagged = line;
                tagged["member"] = k;
                sink(tagged);
            };
            train(model, data.train, tc, LossMode::cross_entropy, member_sink, &data.test,
                  &state);
            save_checkpoint(run_dir + "/model_" + std::to_string(k) + ".ckpt", model,
                            state.history, cfg.to_json(), tc.epochs, state.rng.serialize());
            outcome.final_flops += model.flops();
            if (k == 0) {
                outcome.history = state.history;
                outcome.flops_budget = model.flops_budget;
                write_text(run_dir + "/arch.json", model.to_json().dump(2) + "\n");
                write_text(run_dir + "/arch.dot", model.to_dot());
            }
        }
    } else {
        SubtaskSpec spec;
        LossMode mode;
        std::vector<int> head_widths;
        if (cfg.baseline == "single_model") {
            spec.total_classes = data.train.classes;
            spec.groups = {std::vector<int>(data.train.classes)};
            std::iota(spec.groups[0].begin(), spec.groups[0].end(), 0);
            spec.per_class_count = data.train.mean_per_class_count();
            head_widths = {data.train.classes};  // plain classifier, no OOD slot
            mode = LossMode::cross_entropy;
        } else {
            spec = build_subtask_spec(cfg, data.train);
            mode = LossMode::split_ensemble;
        }
        TreeModel model =
            TreeModel::init_shared(cfg.backbone, spec, input, cfg.train.seed, head_widths);
        TrainState state;
        train(model, data.train, cfg.train, mode, sink, &data.test, &state);
        save_checkpoint(run_dir + "/model.ckpt", model, state.history, cfg.to_json(),
                        cfg.train.epochs, state.rng.serialize());
        write_text(run_dir + "/arch.json", model.to_json().dump(2) + "\n");
        write_text(run_dir + "/arch.dot", model.to_dot());
        outcome.history = state.history;
        outcome.final_flops = model.flops();
        outcome.flops_budget = model.flops_budget;
        outcome.test_accuracy = evaluate_accuracy(model, data.test, mode);
    }
    events.flush();
    return outcome;
}

std::vector<double> score_dataset(const std::string& run_dir, const Dataset& ds) {
    LoadedRun run = load_run(run_dir);
    return scores_for(run, ds);
}

json cmd_eval(const std::string& run_dir_in) {
    const std::string run_dir = resolve_output_dir(run_dir_in);
    LoadedRun run = load_run(run_dir);
    LoadedData data = load_data(run.cfg, false);

    json report;
    report["accuracy"] = 100.0 * accuracy_for(run, data.test);
    report["rows"] = json::array();

    const std::vector<double> id_scores = scores_for(run, data.test);
    double sum_fpr = 0, sum_det = 0, sum_auroc = 0, sum_aupr = 0;
    int ok_rows = 0;
    for (const OodSetCfg& ood_cfg : run.cfg.ood_sets) {
        json row{{"ood_set", ood_cfg.name}};
        try {
            // per-row loading: a missing set fails its row, not the report
            Dataset ood = load_ood_set(ood_cfg, run.cfg, data.test.shape());
            std::vector<double> ood_scores = scores_for(run, ood);
            const MetricsReport m =
                compute_metrics(report["accuracy"].get<double>() / 100.0, id_scores, ood_scores);
            row["fpr_at_95tpr"] = 100.0 * m.fpr_at_95tpr;
            row["detection_error"] = 100.0 * m.detection_error_at_95tpr;
            row["auroc"] = 100.0 * m.auroc;
            row["aupr"] = 100.0 * m.aupr;
            sum_fpr += m.fpr_at_95tpr;
            sum_det += m.detection_error_at_95tpr;
            sum_auroc += m.auroc;
            sum_aupr += m.aupr;
            ++ok_rows;
        } catch (const std::exception& e) {
            row["error"] = e.what();
        }
        report["rows"].push_back(row);
    }
    if (ok_rows > 0) {
        report["mean"] = json{{"fpr_at_95tpr", 100.0 * sum_fpr / ok_rows},
                              {"detection_error", 100.0 * sum_det / ok_rows},
                              {"auroc", 100.0 * sum_auroc / ok_rows},
                              {"aupr", 100.0 * sum_aupr / ok_rows}};
    }

    std::ostringstream csv;
    csv << "ood_set,fpr_at_95tpr,detection_error,auroc,aupr\n";
    for (const auto& row : report["rows"]) {
        if (row.contains("error")) {
            csv << row["ood_set"].get<std::string>() << ",error,error,error,error\n";
            continue;
        }
        csv << row["ood_set"].get<std::string>() << ',' << row["fpr_at_95tpr"].get<double>()
            << ',' << row["detection_error"].get<double>() << ',' << row["auroc"].get<double>()
            << ',' << row["aupr"].get<double>() << '\n';
    }
    if (ok_rows > 0) {
        csv << "mean," << report["mean"]["fpr_at_95tpr"].get<double>() << ','
            << report["mean"]["detection_error"].get<double>() << ','
            << report["mean"]["auroc"].get<double>() << ','
            << report["mean"]["aupr"].get<double>() << '\n';
    }
    write_text(run_dir + "/metrics.json", report.dump(2) + "\n");
    write_text(run_dir + "/metrics.csv", csv.str());
    return report;
}

json cmd_ablate(const ExperimentConfig& base, const json& grid) {
    const std::string out_dir = resolve_output_dir(base.output_dir);
    fs::create_directories(out_dir);

    auto list_of = [&](const std::string& key, json fallback) {
        return grid.contains(key) && grid[key].is_array() && !grid[key].empty()
                   ? grid[key]
                   : json::array({fallback});
    };
    const json modes = list_of("ood_target_mode", ood_mode_name(base.train.ood_target_mode));
    const json thresholds = list_of("mct_threshold", base.train.mct_threshold);
    const json splits = list_of("n_splits", base.subtasks.n_splits);
    const json groupings = list_of("grouping", base.subtasks.strategy);
    const json seeds = list_of("seeds", base.train.seed);

    json cells = json::array();
    int cell_id = 0;
    for (const auto& mode : modes)
        for (const auto& thr : thresholds)
            for (const auto& ns : splits)
                for (const auto& grouping : groupings) {
                    json cell{{"ood_target_mode", mode},
                              {"mct_threshold", thr},
                              {"n_splits", ns},
                              {"grouping", grouping}};
                    std::vector<double> accs, aurocs;
                    json cell_runs = json::array();
                    for (const auto& seed : seeds) {
                        ExperimentConfig cfg = base;
                        cfg.train.ood_target_mode = ood_mode_from_name(mode.get<std::string>());
                        cfg.train.mct_threshold = thr.get<double>();
                        cfg.subtasks.n_splits = ns.get<int>();
                        cfg.subtasks.strategy = grouping.get<std::string>();
                        cfg.train.seed = seed.get<uint64_t>();
                        cfg.output_dir = base.output_dir + "/cell_" + std::to_string(cell_id++);
                        json entry{{"seed", seed}, {"dir", cfg.output_dir}};
                        try {
                            cmd_train(cfg);
                            json metrics = cmd_eval(cfg.output_dir);
                            entry["accuracy"] = metrics["accuracy"];
                            accs.push_back(metrics["accuracy"].get<double>());
                            if (metrics.contains("mean")) {
                                entry["auroc"] = metrics["mean"]["auroc"];
                                aurocs.push_back(metrics["mean"]["auroc"].get<double>());
                            }
                        } catch (const std::exception& e) {
                            entry["error"] = e.what();
                        }
                        cell_runs.push_back(entry);
                    }
                    cell["runs"] = cell_runs;
                    if (!accs.empty())
                        cell["accuracy"] =
                            std::accumulate(accs.begin(), accs.end(), 0.0) / accs.size();
                    if (!aurocs.empty())
                        cell["auroc"] =
                            std::accumulate(aurocs.begin(), aurocs.end(), 0.0) / aurocs.size();
                    cells.push_back(cell);
                }

    json result{{"grid", grid}, {"cells", cells}};
    write_text(out_dir + "/ablate.json", result.dump(2) + "\n");
    std::ostringstream csv;
    csv << "ood_target_mode,mct_threshold,n_splits,grouping,accuracy,auroc\n";
    for (const auto& cell : cells) {
        csv << cell["ood_target_mode"].get<std::string>() << ','
            << cell["mct_threshold"].get<double>() << ',' << cell["n_splits"].get<int>() << ','
            << cell["grouping"].get<std::string>() << ',';
        if (cell.contains("accuracy"))
            csv << cell["accuracy"].get<double>();
        else
            csv << "error";
        csv << ',';
        if (cell.contains("auroc"))
            csv << cell["auroc"].get<double>();
        else
            csv << "error";
        csv << '\n';
    }
    write_text(out_dir + "/ablate.csv", csv.str());
    return result;
}

void cmd_export_arch(const std::string& checkpoint_path, const std::string& out_prefix) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    write_text(out_prefix + ".json", ckpt.model.to_json().dump(2) + "\n");
    write_text(out_prefix + ".dot", ckpt.model.to_dot());
}

void cmd_gen_ood(const std::string& kind, const Shape& shape, int count, uint64_t seed,
                 const std::string& out_path) {
    NoiseKind nk;
    if (kind == "gaussian")
        nk = NoiseKind::gaussian;
    else if (kind == "uniform")
        nk = NoiseKind::uniform;
    else
        throw std::invalid_argument("gen-ood kind must be gaussian or uniform, got " + kind);
    save_dataset(gen_noise_ood(nk, shape, count, seed), out_path);
}

}  // namespace splitens
