// bt2: data generation, training, embedding export, evaluation and analysis drivers.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric error,
// 3 verification failure (selfcheck, verify-lemma1).

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bt2/analysis.hpp"
#include "bt2/binary.hpp"
#include "bt2/checkpoint.hpp"
#include "bt2/config.hpp"
#include "bt2/data.hpp"
#include "bt2/errors.hpp"
#include "bt2/retrieval.hpp"
#include "bt2/selfcheck.hpp"
#include "bt2/train.hpp"

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheck = 3;
constexpr int kReportVersion = 1;

void emit(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
  } else {
    bt2::binary::write_text_atomic(out, text);
  }
}

template <class T>
std::vector<T> split_list(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw bt2::ConfigError(std::string("invalid ") + what + " entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw bt2::ConfigError(std::string("empty ") + what + " list");
  return out;
}

// CSV outputs get a JSON sidecar holding the format version and resolved config.
void emit_csv(const std::string& out, const std::string& csv, const json& config) {
  emit(out, csv);
  if (out.empty()) return;
  json j;
  j["format_version"] = kReportVersion;
  j["config"] = config;
  bt2::binary::write_text_atomic(out + ".json", j.dump(2) + "\n");
}

json report_json(const bt2::retrieval::EvalReport& r, const json& config) {
  json j;
  j["format_version"] = kReportVersion;
  j["case"] = r.case_name;
  j["cmc1"] = r.cmc1;
  j["cmc5"] = r.cmc5;
  j["map"] = r.map;
  j["queries"] = r.queries;
  j["gallery"] = r.gallery;
  j["excluded_queries"] = r.excluded_queries;
  j["config"] = config;
  return j;
}

std::string report_csv(const std::vector<bt2::retrieval::EvalReport>& reports) {
  std::string out = "case,cmc1,cmc5,map,queries,gallery,excluded_queries\n";
  for (const auto& r : reports) {
    out += r.case_name + "," + bt2::analysis::fmt(r.cmc1) + "," + bt2::analysis::fmt(r.cmc5) + "," +
           bt2::analysis::fmt(r.map) + "," + std::to_string(r.queries) + "," + std::to_string(r.gallery) + "," +
           std::to_string(r.excluded_queries) + "\n";
  }
  return out;
}

// Shared flags for the pipeline drivers (ablate-dims, series, seeds).
struct PipelineFlags {
  bt2::analysis::PipelineConfig cfg;
  std::uint64_t seed = 1;

  void add(CLI::App& app) {
    app.add_option("--seed", seed, "training seed");
    app.add_option("--data-seed", cfg.data.seed, "synthetic data seed");
    app.add_option("--classes", cfg.data.num_classes, "number of classes");
    app.add_option("--per-class", cfg.data.per_class, "samples per class");
    app.add_option("--features", cfg.data.feature_dim, "feature dimension");
    app.add_option("--separation", cfg.data.separation, "class-mean radius");
    app.add_option("--old-fraction", cfg.old_fraction, "fraction of classes seen by the old model");
    app.add_option("--epochs", cfg.train.epochs, "training epochs");
    app.add_option("--lr", cfg.train.optimizer.learning_rate, "learning rate");
    app.add_option("--batch-size", cfg.train.batch_size, "batch size");
    app.add_option("--m", cfg.bt2.m, "new-independent embedding dim");
    app.add_option("--n", cfg.bt2.n, "old embedding dim");
    app.add_option("--d", cfg.bt2.d, "extra dimensions");
  }

  json to_json() const {
    json j;
    j["seed"] = seed;
    j["data_seed"] = cfg.data.seed;
    j["classes"] = cfg.data.num_classes;
    j["per_class"] = cfg.data.per_class;
    j["features"] = cfg.data.feature_dim;
    j["separation"] = cfg.data.separation;
    j["old_fraction"] = cfg.old_fraction;
    j["epochs"] = cfg.train.epochs;
    j["lr"] = cfg.train.optimizer.learning_rate;
    j["batch_size"] = cfg.train.batch_size;
    j["m"] = cfg.bt2.m;
    j["n"] = cfg.bt2.n;
    j["d"] = cfg.bt2.d;
    return j;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bt2: backward-compatible embedding training with basis transformation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write synthetic train, old-train and validation datasets");
  bt2::data::SyntheticSpec gen_spec;
  double gen_old_fraction = 0.5;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_spec.seed, "data seed");
  gen->add_option("--classes", gen_spec.num_classes, "number of classes");
  gen->add_option("--per-class", gen_spec.per_class, "samples per class");
  gen->add_option("--features", gen_spec.feature_dim, "feature dimension");
  gen->add_option("--separation", gen_spec.separation, "class-mean radius");
  gen->add_option("--old-fraction", gen_old_fraction, "fraction of classes in the old split");

  // train
  auto* tr = app.add_subcommand("train", "train one method and write a checkpoint");
  std::string tr_config;
  bt2::config::KeyValues tr_flags;
  auto flag = [&](const char* name, const char* key, const char* help) {
    tr->add_option_function<std::string>(
        name, [&tr_flags, key](const std::string& v) { tr_flags.emplace_back(key, v); }, help);
  };
  tr->add_option("--config", tr_config, "key = value config file");
  flag("--method", "method", "old | new-independent | bct | bct-pad | contrast | bt2 | upper-bound");
  flag("--data", "data", "training dataset (.dset)");
  flag("--out", "out", "output checkpoint");
  flag("--old-model", "old_model", "frozen old checkpoint");
  flag("--new-independent", "new_independent", "frozen independently trained new checkpoint");
  flag("--seed", "seed", "training seed");
  flag("--lr", "lr", "learning rate");
  flag("--epochs", "epochs", "training epochs");
  flag("--batch-size", "batch_size", "batch size");
  flag("--lambda", "lambda", "influence / contrast weight");
  flag("--lambda1", "lambda1", "phi3 alignment weight");
  flag("--lambda2", "lambda2", "old-head weight on phi5");
  flag("--lambda3", "lambda3", "phi5 alignment weight");
  flag("--tau", "tau", "contrast temperature");
  flag("--m", "m", "new-independent embedding dim");
  flag("--n", "n", "old embedding dim");
  flag("--d", "d", "extra dimensions");
  flag("--c-scale", "c_scale", "norm of phi4");
  tr->add_flag_function(
      "--cls-on-final", [&tr_flags](std::int64_t) { tr_flags.emplace_back("cls_on_final", "true"); },
      "classify on the final embedding instead of phi3");

  // embed
  auto* em = app.add_subcommand("embed", "embed a dataset with a checkpoint");
  std::string em_model, em_data, em_out, em_tag;
  bool em_no_labels = false;
  em->add_option("--model", em_model, "checkpoint")->required();
  em->add_option("--data", em_data, "dataset (.dset)")->required();
  em->add_option("--out", em_out, "output embedding file")->required();
  em->add_option("--tag", em_tag, "model tag stored in the file (default: method name)");
  em->add_flag("--no-labels", em_no_labels, "store no labels");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate query embeddings against a gallery");
  std::string ev_query, ev_gallery, ev_metrics = "cmc1,cmc5,map", ev_out;
  bool ev_no_self = false;
  ev->add_option("--query", ev_query, "query embedding file")->required();
  ev->add_option("--gallery", ev_gallery, "gallery embedding file")->required();
  ev->add_option("--metrics", ev_metrics, "comma list of cmc1,cmc5,map");
  ev->add_flag("--no-self-exclude", ev_no_self, "keep items whose id equals the query id");
  ev->add_option("--out", ev_out, "output prefix; writes PREFIX.jsonl and PREFIX.csv");

  // check-compat
  auto* cc = app.add_subcommand("check-compat", "backward-compatibility verdict for a model update");
  std::string cc_old_q, cc_new_q, cc_gallery, cc_metrics = "cmc1,cmc5,map", cc_out;
  double cc_slack = 0.0;
  bool cc_no_self = false;
  cc->add_option("--old-query", cc_old_q, "old-model query embeddings")->required();
  cc->add_option("--new-query", cc_new_q, "new-model query embeddings")->required();
  cc->add_option("--gallery", cc_gallery, "old-model gallery embeddings")->required();
  cc->add_option("--metrics", cc_metrics, "comma list of cmc1,cmc5,map");
  cc->add_option("--slack", cc_slack, "allowed drop for the relaxed check");
  cc->add_flag("--no-self-exclude", cc_no_self, "keep items whose id equals the query id");
  cc->add_option("--out", cc_out, "output JSON file");

  // ablate-dims
  auto* ab = app.add_subcommand("ablate-dims", "train one bt2 model per extra-dimension count");
  PipelineFlags ab_flags;
  std::string ab_dims = "8,16,32", ab_out;
  ab_flags.add(*ab);
  ab->add_option("--dims", ab_dims, "comma list of extra-dimension counts");
  ab->add_option("--out", ab_out, "output CSV");

  // series
  auto* se = app.add_subcommand("series", "a chain of model updates, every later model against every earlier one");
  PipelineFlags se_flags;
  std::string se_stages = "bt2:4,bt2:4", se_out;
  se_flags.add(*se);
  se->add_option("--stages", se_stages, "updates after the old model, e.g. bt2:4,bt2:4,bct");
  se->add_option("--out", se_out, "output CSV");

  // verify-lemma1
  auto* vl = app.add_subcommand("verify-lemma1", "search for violations of the angular bound");
  std::string vl_eps = "0.01,0.05,0.1,0.2,0.3";
  std::size_t vl_trials = 100000;
  std::uint64_t vl_seed = 7;
  vl->add_option("--eps", vl_eps, "comma list of eps values");
  vl->add_option("--trials", vl_trials, "trials per eps");
  vl->add_option("--seed", vl_seed, "search seed");

  // seeds
  auto* sd = app.add_subcommand("seeds", "run the 7-method pipeline per seed; mean and std per metric");
  PipelineFlags sd_flags;
  std::string sd_seeds = "1,2,3,4,5", sd_out;
  sd_flags.add(*sd);
  sd->add_option("--seeds", sd_seeds, "comma list of seeds");
  sd->add_option("--out", sd_out, "output CSV");

  // selfcheck
  auto* sc = app.add_subcommand("selfcheck", "run the invariant suite");
  bt2::selfcheck::Options sc_opts;
  sc->add_option("--seed", sc_opts.seed, "seed for random instances");
  sc->add_flag("--inject-skew-fault", sc_opts.inject_skew_fault, "test hook: build non-skew matrices")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) {
      const auto split = bt2::data::gen_synthetic(gen_spec);
      const auto [old_train, full] = bt2::data::split_old_new(split.train, gen_old_fraction);
      fs::create_directories(gen_out);
      bt2::data::write_dataset(fs::path(gen_out) / "train.dset", "train", full);
      bt2::data::write_dataset(fs::path(gen_out) / "old_train.dset", "old_train", old_train);
      bt2::data::write_dataset(fs::path(gen_out) / "val.dset", "val", split.validation);
      std::cout << "wrote " << full.size() << " train, " << old_train.size() << " old-train, "
                << split.validation.size() << " validation samples to " << gen_out << "\n";
      return kExitOk;
    }

    if (*tr) {
      const auto file = tr_config.empty() ? bt2::config::KeyValues{} : bt2::config::read_config_file(tr_config);
      const auto cfg = bt2::config::resolve(file, tr_flags);
      if (cfg.out.empty()) throw bt2::ConfigError("train: --out is required");
      if (cfg.data.empty() && *cfg.method != bt2::model::Method::upper_bound) {
        throw bt2::ConfigError("train: --data is required");
      }
      std::optional<bt2::model::Model> old_model, indep;
      if (!cfg.old_model.empty()) old_model = bt2::checkpoint::load(cfg.old_model);
      if (!cfg.new_independent.empty()) indep = bt2::checkpoint::load(cfg.new_independent);
      const auto ds = cfg.data.empty() ? bt2::data::Dataset{} : bt2::data::read_dataset(cfg.data);
      if (!cfg.data.empty()) ds.validate();
      const auto result = bt2::train::train(cfg.run, ds, old_model ? &*old_model : nullptr, indep ? &*indep : nullptr);
      bt2::checkpoint::save(cfg.out, result.model);

      json rep;
      rep["format_version"] = kReportVersion;
      json c;
      for (const auto& [k, v] : bt2::config::to_key_values(cfg)) c[k] = v;
      rep["config"] = c;
      rep["epoch_loss"] = result.epoch_loss;
      rep["embedding_dim"] = result.model.embedding_dim();
      if (result.divergence) rep["divergence"] = *result.divergence;
      bt2::binary::write_text_atomic(cfg.out + ".json", rep.dump(2) + "\n");
      if (result.divergence) {
        std::cerr << "training diverged (" << *result.divergence << "); last good checkpoint written to " << cfg.out
                  << "\n";
        return kExitRuntime;
      }
      std::cout << "wrote " << cfg.out << " (" << bt2::model::to_string(result.model.method) << ", dim "
                << result.model.embedding_dim() << ")\n";
      return kExitOk;
    }

    if (*em) {
      const auto model = bt2::checkpoint::load(em_model);
      const auto ds = bt2::data::read_dataset(em_data);
      const std::string tag = em_tag.empty() ? std::string(bt2::model::to_string(model.method)) : em_tag;
      const auto records = bt2::train::embed_records(model, ds, tag);
      bt2::data::write_embeddings(em_out, tag, records, !em_no_labels);
      std::cout << "wrote " << records.size() << " embeddings of dim " << model.embedding_dim() << " to " << em_out
                << "\n";
      return kExitOk;
    }

    if (*ev) {
      const auto metrics = bt2::retrieval::parse_metrics(ev_metrics);
      const auto q = bt2::data::read_embeddings(ev_query);
      const auto g = bt2::data::read_embeddings(ev_gallery);
      const std::string qtag = q.empty() ? "" : q.records().front().model_tag;
      const std::string gtag = g.empty() ? "" : g.records().front().model_tag;
      const auto report = bt2::retrieval::evaluate(qtag + "/" + gtag, q.records(), g, {!ev_no_self, metrics});
      json c;
      c["query"] = ev_query;
      c["gallery"] = ev_gallery;
      c["metrics"] = ev_metrics;
      c["exclude_self"] = !ev_no_self;
      const std::string line = report_json(report, c).dump() + "\n";
      if (ev_out.empty()) {
        std::cout << line;
      } else {
        bt2::binary::write_text_atomic(ev_out + ".jsonl", line);
        bt2::binary::write_text_atomic(ev_out + ".csv", report_csv({report}));
      }
      return kExitOk;
    }

    if (*cc) {
      const auto metrics = bt2::retrieval::parse_metrics(cc_metrics);
      const auto oq = bt2::data::read_embeddings(cc_old_q);
      const auto nq = bt2::data::read_embeddings(cc_new_q);
      const auto g = bt2::data::read_embeddings(cc_gallery);
      const auto v =
          bt2::retrieval::check_backward_compat(oq.records(), nq.records(), g, metrics, cc_slack, !cc_no_self);
      json j;
      j["format_version"] = kReportVersion;
      j["relaxed_pass"] = v.relaxed_pass;
      json rel = json::array();
      for (const auto& r : v.relaxed) {
        rel.push_back({{"metric", bt2::retrieval::to_string(r.metric)},
                       {"new_old", r.candidate},
                       {"old_old", r.reference},
                       {"pass", r.pass}});
      }
      j["relaxed"] = rel;
      j["strict_pairs"] = v.strict_pairs;
      j["strict_violations"] = v.strict_violations;
      j["strict_violation_fraction"] = v.strict_violation_fraction;
      j["config"] = {{"old_query", cc_old_q},
                     {"new_query", cc_new_q},
                     {"gallery", cc_gallery},
                     {"metrics", cc_metrics},
                     {"slack", cc_slack},
                     {"exclude_self", !cc_no_self}};
      emit(cc_out, j.dump(2) + "\n");
      return kExitOk;
    }

    if (*ab) {
      const auto dims = split_list<std::size_t>(ab_dims, "dims");
      const auto rows = bt2::analysis::run_ablation(dims, ab_flags.cfg, ab_flags.seed);
      json c = ab_flags.to_json();
      c["dims"] = ab_dims;
      emit_csv(ab_out, bt2::analysis::ablation_csv(rows), c);
      for (const auto& r : rows)
        if (r.error) std::cerr << "d=" << r.d << ": " << *r.error << "\n";
      return kExitOk;
    }

    if (*se) {
      bt2::analysis::SeriesPlan plan;
      plan.stages.push_back({bt2::model::Method::old, 0});
      std::stringstream ss(se_stages);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        bt2::analysis::SeriesStage st;
        st.method = bt2::model::parse_method(item.substr(0, colon));
        if (colon != std::string::npos) st.d = split_list<std::size_t>(item.substr(colon + 1), "stage d").front();
        plan.stages.push_back(st);
      }
      const auto result = bt2::analysis::run_series(plan, se_flags.cfg, se_flags.seed);
      json c = se_flags.to_json();
      c["stages"] = se_stages;
      emit_csv(se_out, bt2::analysis::series_csv(result), c);
      if (result.error) {
        std::cerr << "series stopped after stage " << result.stage_dims.size() << ": " << *result.error << "\n";
        return kExitRuntime;
      }
      return kExitOk;
    }

    if (*vl) {
      bool clean = true;
      for (double eps : split_list<double>(vl_eps, "eps")) {
        const auto r = bt2::analysis::lemma1_search(eps, vl_trials, vl_seed);
        json j;
        j["eps"] = eps;
        j["trials"] = r.trials;
        j["kept"] = r.kept;
        j["bound"] = r.bound;
        j["worst_cosine"] = r.worst_cosine;
        j["violations"] = r.violations;
        j["inconclusive"] = r.inconclusive;
        std::cout << j.dump() << "\n";
        clean = clean && r.violations == 0;
      }
      return clean ? kExitOk : kExitCheck;
    }

    if (*sd) {
      const auto result = bt2::analysis::run_seeds(split_list<std::uint64_t>(sd_seeds, "seeds"), sd_flags.cfg);
      json c = sd_flags.to_json();
      c["seeds"] = sd_seeds;
      emit_csv(sd_out, bt2::analysis::seeds_csv(result), c);
      return kExitOk;
    }

    if (*sc) {
      const auto lines = bt2::selfcheck::run(sc_opts);
      for (const auto& l : lines) std::cout << (l.passed ? "PASS " : "FAIL ") << l.name << ": " << l.detail << "\n";
      return bt2::selfcheck::all_passed(lines) ? kExitOk : kExitCheck;
    }
  } catch (const bt2::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const bt2::FormatError& e) {
    std::cerr << "format error at byte " << e.offset() << ": " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
