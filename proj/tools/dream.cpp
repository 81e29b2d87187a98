// Command line front end for the drift pipeline: data generation, model
// training, drift scoring, explanation, adaptation, and batch experiments.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dream/harness.hpp"

using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool out_required) {
    cmd->add_option("--config", opts.config_path, "experiment config JSON; omitted keys keep defaults");
    cmd->add_option("--seed", opts.seed, "override the seed of the step being run");
    auto* o = cmd->add_option("--out", opts.out, "output path");
    if (out_required) o->required();
}

dream::ExperimentConfig load_config(const CommonOpts& opts) {
    if (opts.config_path.empty()) return dream::ExperimentConfig{};
    return dream::load_experiment_config(opts.config_path);
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw dream::IoError("cannot open for write: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw dream::IoError("failed writing: " + path);
}

int run(int argc, char** argv) {
    CLI::App app{"concept drift detection, explanation, and adaptation pipeline"};
    app.require_subcommand(1);

    // gen-data ------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic malware-family dataset");
    CommonOpts gen_opts;
    std::optional<std::int64_t> gen_id_base;
    add_common(gen, gen_opts, true);
    gen->add_option("--id-base", gen_id_base, "first sample id; lets separate files keep disjoint ids");

    // train-classifier ------------------------------------------------------
    auto* tc = app.add_subcommand("train-classifier", "train the family classifier");
    CommonOpts tc_opts;
    std::string tc_data, tc_report;
    add_common(tc, tc_opts, true);
    tc->add_option("--data", tc_data, "training dataset (JSONL)")->required();
    tc->add_option("--report", tc_report, "write the per-epoch training report JSON here");

    // train-detector ----------------------------------------------------------
    auto* td = app.add_subcommand("train-detector", "train the concept autoencoder drift detector");
    CommonOpts td_opts;
    std::string td_data, td_clf, td_centroids, td_report;
    add_common(td, td_opts, true);
    td->add_option("--data", td_data, "training dataset (JSONL)")->required();
    td->add_option("--classifier", td_clf,
                   "trained classifier; optional only when the reliability weight is 0");
    td->add_option("--centroids", td_centroids, "also write per-family latent centroids JSON here");
    td->add_option("--report", td_report, "write the per-epoch training report JSON here");

    // detect ---------------------------------------------------------------
    auto* de = app.add_subcommand("detect", "score samples for drift");
    CommonOpts de_opts;
    std::string de_data, de_method = "crd", de_clf, de_det, de_centroids, de_train, de_model,
                de_save_model;
    add_common(de, de_opts, true);
    de->add_option("--data", de_data, "samples to score (JSONL)")->required();
    de->add_option("--method", de_method, "prob | crd | cade | nce | transcendent")
        ->check(CLI::IsMember({"prob", "crd", "cade", "nce", "transcendent"}));
    de->add_option("--classifier", de_clf, "classifier file (prob, crd, nce)");
    de->add_option("--detector", de_det, "detector file (crd, cade, nce)");
    de->add_option("--centroids", de_centroids, "centroid file (cade)");
    de->add_option("--train", de_train, "training dataset (nce; transcendent when fitting)");
    de->add_option("--model", de_model, "fitted cross-conformal model file (transcendent)");
    de->add_option("--save-model", de_save_model,
                   "when fitting the cross-conformal model, also save it here");

    // explain --------------------------------------------------------------
    auto* ex = app.add_subcommand("explain", "explain one drift sample against its nearest family");
    CommonOpts ex_opts;
    std::string ex_data, ex_clf, ex_det, ex_centroids, ex_train, ex_space = "concept";
    std::int64_t ex_id = -1;
    add_common(ex, ex_opts, true);
    ex->add_option("--data", ex_data, "dataset holding the sample (JSONL)")->required();
    ex->add_option("--id", ex_id, "sample id to explain; default first row");
    ex->add_option("--classifier", ex_clf, "classifier file")->required();
    ex->add_option("--detector", ex_det, "detector file")->required();
    ex->add_option("--centroids", ex_centroids, "centroid file")->required();
    ex->add_option("--train", ex_train, "training dataset for reference selection")->required();
    ex->add_option("--space", ex_space, "concept | feature")
        ->check(CLI::IsMember({"concept", "feature"}));

    // adapt ----------------------------------------------------------------
    auto* ad = app.add_subcommand("adapt", "update models from analyst feedback");
    CommonOpts ad_opts;
    std::string ad_clf, ad_det, ad_train, ad_pool, ad_feedback, ad_method = "adapt_dream",
                ad_out_det, ad_report;
    add_common(ad, ad_opts, true);
    ad->add_option("--classifier", ad_clf, "classifier file")->required();
    ad->add_option("--detector", ad_det, "detector file (adapt_dream)");
    ad->add_option("--train", ad_train, "original training dataset (JSONL)")->required();
    ad->add_option("--pool", ad_pool, "pool dataset the feedback ids refer to (JSONL)")->required();
    ad->add_option("--feedback", ad_feedback, "analyst feedback (JSONL)")->required();
    ad->add_option("--method", ad_method, "adapt_dream | retrain_baseline")
        ->check(CLI::IsMember({"adapt_dream", "retrain_baseline"}));
    ad->add_option("--out-detector", ad_out_det, "updated detector path (adapt_dream)");
    ad->add_option("--report", ad_report, "write the adaptation report JSON here");

    // run-experiment ----------------------------------------------------------
    auto* re = app.add_subcommand("run-experiment", "run a batch experiment over families and seeds");
    CommonOpts re_opts;
    std::string re_kind = "detection", re_csv;
    add_common(re, re_opts, true);
    re->add_option("--kind", re_kind, "detection | adaptation | explanation")
        ->check(CLI::IsMember({"detection", "adaptation", "explanation"}));
    re->add_option("--csv", re_csv, "also write the per-budget CSV table (adaptation)");

    // report -----------------------------------------------------------------
    auto* rp = app.add_subcommand("report", "summarize an adaptation report");
    CommonOpts rp_opts;
    std::string rp_in, rp_csv;
    double rp_target = 0.9;
    add_common(rp, rp_opts, false);
    rp->add_option("--in", rp_in, "adaptation report JSON")->required();
    rp->add_option("--target", rp_target, "accuracy target for the budget curve");
    rp->add_option("--csv", rp_csv, "write the per-budget CSV table here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
        return e.get_exit_code();
    }

    if (*gen) {
        dream::ExperimentConfig cfg = load_config(gen_opts);
        if (gen_opts.seed) cfg.data.seed = *gen_opts.seed;
        if (gen_id_base) cfg.data.id_base = *gen_id_base;
        dream::save_dataset(dream::generate_synthetic(cfg.data), gen_opts.out);
    } else if (*tc) {
        dream::ExperimentConfig cfg = load_config(tc_opts);
        if (tc_opts.seed) cfg.classifier.seed = *tc_opts.seed;
        const dream::Dataset data = dream::load_dataset(tc_data);
        dream::ClassifierTrainReport report;
        const dream::MalwareClassifier clf = dream::train_classifier(data, cfg.classifier, &report);
        dream::save_classifier(clf, tc_opts.out);
        if (!tc_report.empty())
            write_json_file(
                {{"epoch_ce", report.epoch_ce}, {"train_accuracy", report.train_accuracy}},
                tc_report);
    } else if (*td) {
        dream::ExperimentConfig cfg = load_config(td_opts);
        if (td_opts.seed) cfg.detector.seed = *td_opts.seed;
        const dream::Dataset data = dream::load_dataset(td_data);
        std::optional<dream::MalwareClassifier> clf;
        if (!td_clf.empty()) clf = dream::load_classifier(td_clf);
        dream::DetectorTrainReport report;
        const dream::ConceptAutoencoder det =
            dream::train_detector(data, clf ? &*clf : nullptr, cfg.detector, &report);
        dream::save_detector(det, td_opts.out);
        if (!td_centroids.empty())
            dream::save_centroids(dream::class_centroids(det, data), td_centroids);
        if (!td_report.empty())
            write_json_file({{"epoch_total", report.epoch_total},
                             {"epoch_det", report.epoch_det},
                             {"warnings", report.warnings}},
                            td_report);
    } else if (*de) {
        dream::ExperimentConfig cfg = load_config(de_opts);
        const dream::Dataset data = dream::load_dataset(de_data);

        std::optional<dream::MalwareClassifier> clf;
        std::optional<dream::ConceptAutoencoder> det;
        std::optional<dream::CadeModel> cade;
        std::optional<dream::TranscendentModel> trans;
        std::optional<dream::Dataset> train;
        std::optional<dream::NceDetector> nce;
        std::unique_ptr<dream::DriftDetector> scorer;

        auto need = [](const std::string& value, const std::string& flag,
                       const std::string& method) {
            if (value.empty())
                throw dream::InvalidInput("detect --method " + method + " requires " + flag);
        };
        if (de_method == "prob") {
            need(de_clf, "--classifier", de_method);
            clf = dream::load_classifier(de_clf);
            scorer = std::make_unique<dream::ProbabilityDetector>(*clf);
        } else if (de_method == "crd") {
            need(de_clf, "--classifier", de_method);
            need(de_det, "--detector", de_method);
            clf = dream::load_classifier(de_clf);
            det = dream::load_detector(de_det);
            scorer = std::make_unique<dream::CrdDetector>(*det, *clf);
        } else if (de_method == "cade") {
            need(de_det, "--detector", de_method);
            need(de_centroids, "--centroids", de_method);
            cade = dream::CadeModel{dream::load_detector(de_det),
                                    dream::load_centroids(de_centroids)};
            scorer = std::make_unique<dream::CadeDetector>(*cade);
        } else if (de_method == "nce") {
            need(de_clf, "--classifier", de_method);
            need(de_det, "--detector", de_method);
            need(de_train, "--train", de_method);
            clf = dream::load_classifier(de_clf);
            det = dream::load_detector(de_det);
            train = dream::load_dataset(de_train);
            nce.emplace(*det, *clf, *train, cfg.nce);
        } else {  // transcendent
            if (!de_model.empty()) {
                trans = dream::load_transcendent(de_model);
            } else {
                need(de_train, "--train", de_method + " (without --model)");
                train = dream::load_dataset(de_train);
                trans = dream::transcendent_fit(*train, cfg.classifier, cfg.transcendent_folds,
                                                de_opts.seed.value_or(cfg.classifier.seed));
                if (!de_save_model.empty()) dream::save_transcendent(*trans, de_save_model);
            }
            scorer = std::make_unique<dream::TranscendentDetector>(*trans);
        }

        const dream::DriftDetector& active = nce ? static_cast<dream::DriftDetector&>(*nce) : *scorer;
        std::ofstream out(de_opts.out);
        if (!out) throw dream::IoError("cannot open for write: " + de_opts.out);
        for (int r = 0; r < data.size(); ++r) {
            const dream::DriftScore s = active.score(data.features.row(r));
            json line = {{"id", data.ids[static_cast<std::size_t>(r)]},
                         {"score", s.value},
                         {"detector", s.detector}};
            if (!s.fold_p_values.empty()) line["fold_p_values"] = s.fold_p_values;
            out << line.dump() << "\n";
        }
        if (!out) throw dream::IoError("failed writing: " + de_opts.out);
    } else if (*ex) {
        dream::ExperimentConfig cfg = load_config(ex_opts);
        if (ex_opts.seed) cfg.explainer.seed = *ex_opts.seed;
        const dream::Dataset data = dream::load_dataset(ex_data);
        const dream::Dataset train = dream::load_dataset(ex_train);
        const dream::MalwareClassifier clf = dream::load_classifier(ex_clf);
        const dream::ConceptAutoencoder det = dream::load_detector(ex_det);
        const dream::ClassCentroids centroids = dream::load_centroids(ex_centroids);

        int row = 0;
        if (ex_id >= 0) {
            row = data.find_id(ex_id);
            if (row < 0)
                throw dream::InvalidInput("explain: id " + std::to_string(ex_id) +
                                          " not in " + ex_data);
        } else if (data.size() == 0) {
            throw dream::InvalidInput("explain: dataset is empty");
        }
        const dream::RowVec x_d = data.features.row(row);
        const dream::Reference ref = dream::select_reference(det, clf, train, centroids, x_d);
        const dream::ExplanationResult result =
            ex_space == "concept"
                ? dream::explain_concept(det, clf, centroids, x_d, ref.features, cfg.explainer,
                                         ref.sample_id)
                : dream::explain_feature(det, clf, centroids, x_d, ref.features, cfg.explainer,
                                         ref.sample_id);

        dream::RowVec perturbed, perturbed_latent;
        dream::apply_binary_mask(det, x_d, ref.features, result.mask, ex_space, &perturbed,
                                 &perturbed_latent);
        const dream::CrdDetector crd(det, clf);
        json out = dream::explanation_to_json(result, data.behavior_names);
        out["sample_id"] = data.ids[static_cast<std::size_t>(row)];
        out["cbp"] = dream::metric_cbp(crd, train, ref.family, perturbed);
        out["drr"] = dream::metric_drr(det, x_d, ref.features, perturbed_latent);
        write_json_file(out, ex_opts.out);
    } else if (*ad) {
        dream::ExperimentConfig cfg = load_config(ad_opts);
        if (ad_opts.seed) cfg.adaptor.seed = *ad_opts.seed;
        const dream::Dataset train = dream::load_dataset(ad_train);
        const dream::Dataset pool = dream::load_dataset(ad_pool);
        const auto feedback = dream::load_feedback(ad_feedback);
        const dream::MalwareClassifier clf = dream::load_classifier(ad_clf);

        dream::AdaptationReport report;
        if (ad_method == "retrain_baseline") {
            const dream::MalwareClassifier updated =
                dream::retrain_baseline(clf, train, pool, feedback, cfg.adaptor, &report);
            dream::save_classifier(updated, ad_opts.out);
        } else {
            if (ad_det.empty())
                throw dream::InvalidInput("adapt --method adapt_dream requires --detector");
            const dream::ConceptAutoencoder det = dream::load_detector(ad_det);
            auto [clf2, det2] =
                dream::adapt_dream(clf, det, train, pool, feedback, cfg.adaptor, &report);
            dream::save_classifier(clf2, ad_opts.out);
            if (!ad_out_det.empty()) dream::save_detector(det2, ad_out_det);
        }
        if (!ad_report.empty()) {
            json sched = json::array();
            for (const auto& ev : report.schedule)
                sched.push_back({{"epoch", ev.epoch},
                                 {"mean_det_loss", ev.mean_det_loss},
                                 {"lr_before", ev.lr_before},
                                 {"lr_after", ev.lr_after}});
            write_json_file({{"schedule", sched},
                             {"epoch_total", report.epoch_total},
                             {"epoch_det", report.epoch_det},
                             {"threshold_used", report.threshold_used},
                             {"warnings", report.warnings}},
                            ad_report);
        }
    } else if (*re) {
        dream::ExperimentConfig cfg = load_config(re_opts);
        if (re_opts.seed) cfg.seeds = {*re_opts.seed};
        json report;
        if (re_kind == "detection")
            report = dream::run_detection_experiment(cfg);
        else if (re_kind == "adaptation")
            report = dream::run_adaptation_experiment(cfg);
        else
            report = dream::run_explanation_experiment(cfg);
        dream::write_json_report(report, re_opts.out);
        if (!re_csv.empty()) {
            if (re_kind != "adaptation")
                throw dream::InvalidInput("--csv applies to --kind adaptation only");
            dream::write_adaptation_csv(report, re_csv);
        }
    } else if (*rp) {
        std::ifstream in(rp_in);
        if (!in) throw dream::IoError("cannot open for read: " + rp_in);
        json report;
        try {
            in >> report;
        } catch (const json::exception& e) {
            throw dream::IoError("report file: " + std::string(e.what()));
        }
        const json curve = dream::budget_curve(report, rp_target);
        if (!rp_csv.empty()) dream::write_adaptation_csv(report, rp_csv);
        if (rp_opts.out.empty())
            std::cout << curve.dump(2) << "\n";
        else
            write_json_file(curve, rp_opts.out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const dream::Error& e) {
        std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
        return 2;
    }
}
