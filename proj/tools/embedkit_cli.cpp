// embedkit command-line tool. Exit codes: 0 success, 1 usage error,
// 2 runtime or validation error. Diagnostics go to stderr.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>

#include "embedkit/config.hpp"
#include "embedkit/ensemble.hpp"
#include "embedkit/gradsuite.hpp"
#include "embedkit/io.hpp"
#include "embedkit/pipeline.hpp"
#include "embedkit/train.hpp"

using namespace embedkit;

namespace {

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void copy_head(EmbeddingModel& model, const EmbeddingModel& source) {
  auto dst = model.head().parameters();
  const auto src = source.head().parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->tensor.shape() != src[i]->tensor.shape()) {
      throw Error(Errc::InvalidConfig, "head_from: '" + src[i]->name + "' has shape " +
                                           shape_str(src[i]->tensor.shape()) + ", model expects " +
                                           shape_str(dst[i]->tensor.shape()));
    }
    const auto v = src[i]->tensor.values();
    std::copy(v.begin(), v.end(), dst[i]->tensor.mutable_values().begin());
  }
}

struct GenData {
  std::string spec, out;
  void run() const {
    const SyntheticDataset data(load_dataset_spec(spec));
    save_dataset(data, out);
    for (SplitKind kind : {SplitKind::Train, SplitKind::Query, SplitKind::Index}) {
      std::cout << split_name(kind) << ": " << data.split(kind).size() << " images\n";
    }
  }
};

struct Train {
  std::string plan, out;
  std::vector<std::string> data_dirs;
  void run() const {
    const TrainConfig cfg = load_train_config(plan);
    std::vector<SyntheticDataset> datasets;
    for (const auto& dir : data_dirs) datasets.push_back(load_dataset(dir));
    DatasetRegistry registry;
    for (const auto& d : datasets) {
      if (!registry.emplace(d.spec().name, &d).second) {
        throw Error(Errc::InvalidConfig, "two datasets are named '" + d.spec().name + "'");
      }
    }
    EmbeddingModel model = cfg.init_checkpoint ? load_checkpoint(*cfg.init_checkpoint) : EmbeddingModel(cfg.model);
    if (cfg.head_from) copy_head(model, load_checkpoint(*cfg.head_from));

    PlanHooks hooks{[&](std::size_t i, const StageReport& r, const EmbeddingModel& m) {
      save_checkpoint(m, out);
      std::cout << "stage " << i + 1 << " '" << r.name << "': epochs " << r.epoch_losses.size() << ", loss "
                << fixed4(r.epoch_losses.front()) << " -> " << fixed4(r.epoch_losses.back()) << ", frozen "
                << r.mask.frozen.size() << " params (hash " << hex(r.frozen_hash_after) << " unchanged)"
                << (r.pos_embed_resampled ? ", pos_embed resampled" : "")
                << (r.stopped_on_plateau ? ", stopped on plateau" : "") << "\n";
      std::cerr << "stage " << i + 1 << " wall time " << r.wall_seconds << " s\n";
    }};
    run_plan(model, cfg.plan, registry, hooks);
    std::cout << "checkpoint: " << out << "\n";
  }
};

struct Embed {
  std::string ckpt, data, split, out;
  void run() const {
    const EmbeddingModel model = load_checkpoint(ckpt);
    const SyntheticDataset ds = load_dataset(data);
    const EmbeddingSet set = embed_split(model, ds, parse_split(split));
    save_embeddings(set, out);
    std::cout << "embedded " << set.size() << " " << split << " items at " << model.config().vit.image_size
              << "px -> " << out << "\n";
  }
};

PrecisionDenominator parse_denominator(const std::string& s) {
  if (s == "min") return PrecisionDenominator::MinKRelevant;
  if (s == "k") return PrecisionDenominator::K;
  throw Error(Errc::InvalidConfig, "denominator must be 'min' or 'k'");
}

struct Eval {
  std::string queries, index, denominator = "min";
  Index k = 5;
  bool exclude_self = false, per_query = false;
  void run() const {
    RetrievalEvalOptions opts{k, parse_denominator(denominator), exclude_self};
    const auto report = evaluate_retrieval(load_embeddings(queries), load_embeddings(index), opts);
    std::cout << "mP@" << k << " = " << fixed4(report.mean) << "\n";
    std::cout << "queries evaluated = " << report.evaluated_queries << " of " << report.rows.size() << "\n";
    if (per_query) {
      for (const auto& row : report.rows) {
        std::cout << row.query_id << " relevant=" << row.relevant << " hits=" << row.hits_correct
                  << " precision=" << (row.evaluated ? fixed4(row.precision) : std::string("excluded")) << "\n";
      }
    }
  }
};

struct Ensemble {
  std::string mode;
  std::vector<std::string> names, queries, index, adapters, ckpts;
  std::vector<double> weights;
  void run() const {
    const EnsembleMode m = parse_ensemble_mode(mode);
    if (queries.size() != index.size()) throw Error(Errc::InvalidConfig, "--queries and --index need one file per member");
    auto check_count = [&](const auto& v, const char* flag) {
      if (!v.empty() && v.size() != queries.size()) {
        throw Error(Errc::InvalidConfig, std::string(flag) + " needs one entry per member");
      }
    };
    check_count(names, "--members");
    check_count(adapters, "--adapters");
    check_count(ckpts, "--ckpts");
    check_count(weights, "--weights");
    if (m == EnsembleMode::SharedHead && ckpts.empty()) {
      throw Error(Errc::HeadNotShared, "shared-head mode needs --ckpts to verify the members' heads");
    }
    std::vector<MemberEmbeddings> members;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      MemberEmbeddings mem;
      mem.id = names.empty() ? "member" + std::to_string(i + 1) : names[i];
      mem.queries = load_embeddings(queries[i]);
      mem.index = load_embeddings(index[i]);
      if (!ckpts.empty()) mem.head_hash = head_hash(load_checkpoint(ckpts[i]).head());
      if (!adapters.empty() && adapters[i] != "-") mem.adapter = load_adapter(adapters[i]);
      members.push_back(std::move(mem));
    }
    const auto report = ensemble_modes_eval(members, m, weights);
    for (std::size_t i = 0; i < members.size(); ++i) {
      std::cout << members[i].id << ": mP@5 = " << fixed4(report.member_scores[i]) << "\n";
    }
    std::cout << "ensemble (" << ensemble_mode_name(m) << "): mP@5 = " << fixed4(report.ensemble_score) << "\n";
  }
};

struct Compat {
  std::string a, b;
  bool affine = false;
  double tau = 0.05;
  void run() const {
    const auto r = proportionality_check(load_embeddings(a), load_embeddings(b), affine, tau);
    std::cout << "k = " << fixed4(r.k) << "\n"
              << "b = " << fixed4(r.b) << "\n"
              << "residual = " << fixed4(r.residual) << "\n"
              << "verdict = " << (r.compatible() ? "compatible" : "incompatible") << "\n";
  }
};

struct FitAdapter {
  std::string member, anchor, member_ckpt, anchor_ckpt, data, out;
  double ridge = 0.0;
  StageConfig stage = [] {
    StageConfig s;
    s.name = "adapter";
    s.epochs = 10;
    s.lr = 1e-2;
    return s;
  }();
  void run() const {
    Adapter adapter;
    if (!member.empty()) {
      if (anchor.empty()) throw Error(Errc::InvalidConfig, "--member needs --anchor");
      const auto m = load_embeddings(member), a = load_embeddings(anchor);
      adapter = fit_adapter_least_squares(m, a, ridge);
      const double resid = (adapter.apply(m.values) - a.values).norm() / a.values.norm();
      std::cout << "least-squares adapter, relative residual = " << fixed4(resid) << "\n";
    } else {
      if (member_ckpt.empty() || anchor_ckpt.empty() || data.empty()) {
        throw Error(Errc::InvalidConfig, "give --member/--anchor embeddings or --member-ckpt/--anchor-ckpt/--data");
      }
      const EmbeddingModel m = load_checkpoint(member_ckpt), a = load_checkpoint(anchor_ckpt);
      StageConfig s = stage;
      s.resolution = m.config().vit.image_size;
      s.overlap = m.config().vit.overlap;
      AdapterTrainReport rep;
      adapter = fit_adapter_train(m, a.head(), load_dataset(data), s, &rep);
      if (!rep.epoch_losses.empty()) {
        std::cout << "trained adapter, loss " << fixed4(rep.epoch_losses.front()) << " -> "
                  << fixed4(rep.epoch_losses.back()) << "\n";
      }
    }
    save_adapter(adapter, out);
    std::cout << "adapter: " << out << "\n";
  }
};

struct GradCheck {
  std::string module = "all";
  int seeds = 5;
  double tol = 1e-4;
  int run() const {
    int failures = 0;
    for (const auto& r : run_gradient_suite(module, seeds)) {
      const bool ok = r.max_rel_error < tol;
      failures += !ok;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-4s %-24s seed %llu  max rel error %.3e  %s", r.module.c_str(), r.name.c_str(),
                    static_cast<unsigned long long>(r.seed), r.max_rel_error, ok ? "ok" : "FAIL");
      std::cout << buf << "\n";
    }
    if (failures) std::cerr << failures << " gradient checks exceeded " << tol << "\n";
    return failures ? 2 : 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"embedkit: toy ViT embedding training, retrieval and ensembling"};
  app.require_subcommand(1);

  GenData gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic dataset to a directory");
  gen_cmd->add_option("--spec", gen.spec, "Dataset spec (JSON)")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  Train train;
  auto* train_cmd = app.add_subcommand("train", "Run a stage plan; checkpoint after every stage");
  train_cmd->add_option("--plan", train.plan, "Train config (JSON)")->required();
  train_cmd->add_option("--data", train.data_dirs, "Dataset directories")->required();
  train_cmd->add_option("--out", train.out, "Checkpoint path")->required();

  Embed embed;
  auto* embed_cmd = app.add_subcommand("embed", "Write EMB1 embeddings of one split");
  embed_cmd->add_option("--ckpt", embed.ckpt)->required();
  embed_cmd->add_option("--data", embed.data)->required();
  embed_cmd->add_option("--split", embed.split, "train, query or index")->required();
  embed_cmd->add_option("--out", embed.out)->required();

  Eval eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score kNN retrieval between two embedding files");
  eval_cmd->add_option("--queries", eval.queries)->required();
  eval_cmd->add_option("--index", eval.index)->required();
  eval_cmd->add_option("--k", eval.k)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--denominator", eval.denominator, "min: 1/min(k,R_q); k: 1/k");
  eval_cmd->add_flag("--exclude-self", eval.exclude_self, "Skip index rows with the query's id");
  eval_cmd->add_flag("--per-query", eval.per_query);

  Ensemble ens;
  auto* ens_cmd = app.add_subcommand("ensemble", "Evaluate an ensemble of members");
  ens_cmd->add_option("--mode", ens.mode, "naive, shared-head or adapter")->required();
  ens_cmd->add_option("--members", ens.names, "Member names");
  ens_cmd->add_option("--queries", ens.queries, "Query embeddings, one file per member")->required();
  ens_cmd->add_option("--index", ens.index, "Index embeddings, one file per member")->required();
  ens_cmd->add_option("--weights", ens.weights);
  ens_cmd->add_option("--adapters", ens.adapters, "Adapter files per member ('-' for none)");
  ens_cmd->add_option("--ckpts", ens.ckpts, "Member checkpoints (head check for shared-head)");

  Compat compat;
  auto* compat_cmd = app.add_subcommand("compat", "Fit a ~ k b (+ offset) and report the residual");
  compat_cmd->add_option("--a", compat.a)->required();
  compat_cmd->add_option("--b", compat.b)->required();
  compat_cmd->add_flag("--affine", compat.affine);
  compat_cmd->add_option("--tau", compat.tau);

  FitAdapter fit;
  auto* fit_cmd = app.add_subcommand("fit-adapter", "Fit an affine adapter from member to anchor space");
  fit_cmd->add_option("--member", fit.member, "Member embeddings (least squares)");
  fit_cmd->add_option("--anchor", fit.anchor, "Anchor embeddings (least squares)");
  fit_cmd->add_option("--ridge", fit.ridge);
  fit_cmd->add_option("--member-ckpt", fit.member_ckpt, "Member checkpoint (trained variant)");
  fit_cmd->add_option("--anchor-ckpt", fit.anchor_ckpt, "Anchor checkpoint (trained variant)");
  fit_cmd->add_option("--data", fit.data, "Dataset directory (trained variant)");
  fit_cmd->add_option("--epochs", fit.stage.epochs);
  fit_cmd->add_option("--lr", fit.stage.lr);
  fit_cmd->add_option("--out", fit.out)->required();

  GradCheck grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  grad_cmd->add_option("--module", grad.module, "all, vit or head");
  grad_cmd->add_option("--seeds", grad.seeds)->check(CLI::PositiveNumber);
  grad_cmd->add_option("--tol", grad.tol);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen_cmd) gen.run();
    if (*train_cmd) train.run();
    if (*embed_cmd) embed.run();
    if (*eval_cmd) eval.run();
    if (*ens_cmd) ens.run();
    if (*compat_cmd) compat.run();
    if (*fit_cmd) fit.run();
    if (*grad_cmd) return grad.run();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
