#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedtraj/config.hpp"
#include "fedtraj/harness.hpp"
#include "fedtraj/kernels.hpp"
#include "fedtraj/secure_agg.hpp"
#include "fedtraj/tke.hpp"

using json = nlohmann::ordered_json;
using namespace fedtraj;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out_dir;
  std::int64_t seed = -1;
  bool as_json = false;
};

cfg::RunConfig load_config(const GlobalOpts& opts) {
  cfg::RunConfig config =
      opts.config_path.empty() ? cfg::RunConfig{} : cfg::load_run_config(opts.config_path);
  if (!opts.out_dir.empty()) config.out_dir = opts.out_dir;
  if (opts.seed >= 0) config.seed = static_cast<std::uint64_t>(opts.seed);
  return config;
}

int cmd_gen_data(const GlobalOpts& opts) {
  const auto config = load_config(opts);
  const auto paths = fpo::generate_dataset_files(config, config.out_dir);
  if (opts.as_json) {
    json out = {{"train_csv", paths.train_csv},
                {"test_csv", paths.test_csv},
                {"roads_csv", paths.roads_csv}};
    std::cout << out.dump(2) << "\n";
  } else {
    std::cout << "wrote " << paths.train_csv << "\n";
    std::cout << "wrote " << paths.test_csv << "\n";
    std::cout << "wrote " << paths.roads_csv << "\n";
  }
  return 0;
}

void print_metrics(const std::vector<fpo::TaskMetric>& metrics) {
  std::printf("%-6s %-6s %-10s %-12s %-12s %s\n", "task", "seen", "support", "f1", "sed_m",
              "baseline_f1");
  for (const auto& m : metrics) {
    std::printf("%-6s %-6s %-10zu %-12s %-12s %s\n", tasks::task_name(m.task),
                m.seen_in_training ? "yes" : "no", m.support,
                m.f1.has_value() ? std::to_string(*m.f1).c_str() : "-",
                m.sed_m.has_value() ? std::to_string(*m.sed_m).c_str() : "-",
                m.all_positive_f1.has_value() ? std::to_string(*m.all_positive_f1).c_str() : "-");
  }
}

int cmd_train(const GlobalOpts& opts) {
  const auto config = load_config(opts);
  const auto result = fpo::run_training(config);
  if (opts.as_json) {
    std::cout << result.report_json << "\n";
  } else {
    std::cout << "training finished: " << config.rounds << " rounds, " << config.clients
              << " clients (kernels: " << kernels::backend_name() << ")\n";
    print_metrics(result.metrics);
    const auto totals = result.ledger.totals();
    std::cout << "comm totals (bytes): embedding_up=" << totals.embedding_up
              << " result_up=" << totals.result_up << " result_down=" << totals.result_down
              << " lora_up=" << totals.lora_up << " adapter_down=" << totals.adapter_down
              << " tpa_agg=" << totals.tpa_agg << "\n";
    if (!result.out_dir.empty()) std::cout << "report and checkpoints in " << result.out_dir << "\n";
  }
  return 0;
}

int cmd_eval(const GlobalOpts& opts, const std::string& checkpoint_dir, const std::string& tasks_csv) {
  const auto config = load_config(opts);
  std::vector<tasks::TaskKind> which = config.eval_tasks;
  if (!tasks_csv.empty()) {
    which.clear();
    std::string cur;
    for (char ch : tasks_csv + ",") {
      if (ch == ',') {
        if (!cur.empty()) {
          const auto kind = tasks::task_from_name(cur);
          if (!kind.has_value()) fail(Err::ConfigError, "unknown task " + cur);
          which.push_back(*kind);
          cur.clear();
        }
      } else {
        cur.push_back(ch);
      }
    }
  }
  const auto dir = std::filesystem::path(checkpoint_dir);
  const auto metrics = fpo::evaluate_checkpoint(config, (dir / "slm0.bin").string(),
                                                (dir / "slm0.manifest").string(), which);
  if (opts.as_json) {
    json out = json::array();
    for (const auto& m : metrics) {
      json jm = {{"task", tasks::task_name(m.task)}, {"support", m.support}};
      if (m.f1.has_value()) jm["f1"] = *m.f1;
      if (m.sed_m.has_value()) jm["sed_m"] = *m.sed_m;
      if (m.oracle_sed_m.has_value()) jm["oracle_sed_m"] = *m.oracle_sed_m;
      if (m.all_positive_f1.has_value()) jm["all_positive_f1"] = *m.all_positive_f1;
      out.push_back(std::move(jm));
    }
    std::cout << out.dump(2) << "\n";
  } else {
    print_metrics(metrics);
  }
  return 0;
}

// masked aggregation vs plain averaging over randomized trials
int cmd_agg_demo(int clients, int len, std::uint64_t seed, int trials, bool as_json) {
  Rng rng(seed);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<std::vector<double>> params;
    for (int i = 0; i < clients; ++i) {
      std::vector<double> p(static_cast<std::size_t>(len));
      for (double& v : p) v = rng.uniform(-10.0, 10.0);
      params.push_back(std::move(p));
    }
    const auto masked = secagg::run_aggregation_round(params, rng.next_u64(),
                                                      static_cast<std::uint32_t>(trial));
    for (std::size_t e = 0; e < masked.size(); ++e) {
      double mean = 0.0;
      for (const auto& p : params) mean += p[e];
      mean /= static_cast<double>(clients);
      worst = std::max(worst, std::abs(masked[e] - mean));
    }
  }
  const bool pass = worst <= 1e-9;
  if (as_json) {
    std::cout << json({{"clients", clients},
                       {"len", len},
                       {"trials", trials},
                       {"max_abs_error", worst},
                       {"pass", pass}})
                     .dump(2)
              << "\n";
  } else {
    std::printf("masked aggregation vs plain mean over %d trials (%d clients, len %d)\n", trials,
                clients, len);
    std::printf("max |masked_mean - plain_mean| = %.3e  (tolerance 1e-9)\n", worst);
    std::printf("%s\n", pass ? "PASS" : "FAIL");
  }
  return pass ? 0 : 2;
}

// Monte Carlo selection frequencies vs the closed-form inclusion probability
int cmd_select_demo(int n, int n_m, const std::string& ratios_csv, int trials,
                    std::uint64_t seed, bool as_json) {
  std::vector<double> r;
  if (ratios_csv.empty()) {
    r.assign(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
  } else {
    std::string cur;
    for (char ch : ratios_csv + ",") {
      if (ch == ',') {
        if (!cur.empty()) r.push_back(std::stod(cur));
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    double total = 0.0;
    for (double v : r) total += v;
    for (double& v : r) v /= total;
  }
  if (static_cast<int>(r.size()) != n) fail(Err::ConfigError, "ratio count must equal n");

  std::vector<double> closed(r.size());
  for (int i = 0; i < n; ++i) closed[static_cast<std::size_t>(i)] = tke::selection_probability(r, i, n_m);
  std::vector<std::size_t> hits(r.size(), 0);
  for (int trial = 0; trial < trials; ++trial) {
    const auto plan = tke::select_layers(r, n_m, hash_mix(seed, static_cast<std::uint64_t>(trial)), 0);
    for (int id : plan.selected) ++hits[static_cast<std::size_t>(id)];
  }
  double worst = 0.0, prob_sum = 0.0;
  json rows = json::array();
  for (int i = 0; i < n; ++i) {
    const double freq = static_cast<double>(hits[static_cast<std::size_t>(i)]) / trials;
    const double gap = std::abs(freq - closed[static_cast<std::size_t>(i)]);
    worst = std::max(worst, gap);
    prob_sum += closed[static_cast<std::size_t>(i)];
    rows.push_back({{"layer", i},
                    {"ratio", r[static_cast<std::size_t>(i)]},
                    {"closed_form", closed[static_cast<std::size_t>(i)]},
                    {"empirical", freq},
                    {"gap", gap}});
  }
  const bool pass = worst <= 0.005 && std::abs(prob_sum - n_m) <= 1e-9;
  if (as_json) {
    std::cout << json({{"n", n},
                       {"n_m", n_m},
                       {"trials", trials},
                       {"prob_sum", prob_sum},
                       {"max_gap", worst},
                       {"rows", rows},
                       {"pass", pass}})
                     .dump(2)
              << "\n";
  } else {
    std::printf("layer selection: closed form vs %d Monte Carlo trials (n=%d, n_m=%d)\n", trials, n,
                n_m);
    std::printf("%-6s %-10s %-14s %-14s %s\n", "layer", "ratio", "closed_form", "empirical", "gap");
    for (const auto& row : rows) {
      std::printf("%-6d %-10.6f %-14.8f %-14.8f %.6f\n", row["layer"].get<int>(),
                  row["ratio"].get<double>(), row["closed_form"].get<double>(),
                  row["empirical"].get<double>(), row["gap"].get<double>());
    }
    std::printf("sum of inclusion probabilities = %.12f (expect %d)\n", prob_sum, n_m);
    std::printf("max |empirical - closed_form| = %.6f  (tolerance 0.005)\n", worst);
    std::printf("%s\n", pass ? "PASS" : "FAIL");
  }
  return pass ? 0 : 2;
}

int cmd_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Err::IoError, "cannot open " + path);
  json report = json::parse(in);
  std::cout << "run created " << report["header"]["created"].get<std::string>() << " ("
            << report["header"]["kernel_backend"].get<std::string>() << " kernels)\n";
  std::cout << report["header"]["config"].get<std::string>() << "\n\n";

  std::printf("%-6s %-7s %-12s %-12s %-12s %-12s\n", "round", "frozen", "server_l1", "server_l2",
              "mean_l2", "mean_l3");
  for (const auto& round : report["rounds"]) {
    double l2 = 0.0, l3 = 0.0;
    for (const auto& client : round["clients"]) {
      l2 += client["l2"].get<double>();
      l3 += client["l3"].get<double>();
    }
    const auto n = std::max<std::size_t>(1, round["clients"].size());
    std::printf("%-6d %-7s %-12.5f %-12.5f %-12.5f %-12.5f\n", round["round"].get<int>(),
                round["frozen"].get<bool>() ? "yes" : "no", round["server"]["l1"].get<double>(),
                round["server"]["l2"].get<double>(), l2 / n, l3 / n);
  }
  std::cout << "\nselection plans (server): last round selected = "
            << report["rounds"].back()["server"]["selected"].dump() << "\n";
  std::cout << "\nmetrics:\n";
  for (const auto& m : report["metrics"]) {
    std::cout << "  " << m.dump() << "\n";
  }
  std::cout << "\ncomm totals: " << report["comm_totals"].dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated trajectory data preparation simulator"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts opts;
  app.add_option("--config", opts.config_path, "run configuration file");
  app.add_option("--out", opts.out_dir, "output directory (overrides the config)");
  app.add_option("--seed", opts.seed, "seed override");
  app.add_flag("--json", opts.as_json, "machine-readable output");

  auto* gen = app.add_subcommand("gen-data", "generate synthetic dataset CSVs");
  auto* train = app.add_subcommand("train", "run the federated training loop");
  auto* eval = app.add_subcommand("eval", "score a saved SLM checkpoint on the test split");
  std::string checkpoint_dir = "out";
  std::string tasks_csv;
  eval->add_option("--checkpoint", checkpoint_dir, "checkpoint directory from a train run");
  eval->add_option("--tasks", tasks_csv, "comma-separated task list (default: config eval list)");

  auto* agg = app.add_subcommand("agg-demo", "masked aggregation vs plain averaging");
  int agg_clients = 3, agg_len = 100, agg_trials = 100;
  std::int64_t agg_seed = 42;
  agg->add_option("--clients", agg_clients, "number of clients");
  agg->add_option("--len", agg_len, "parameter vector length");
  agg->add_option("--trials", agg_trials, "number of randomized rounds");
  agg->add_option("--demo-seed", agg_seed, "seed for the randomized trials");

  auto* sel = app.add_subcommand("select-demo", "layer-selection probabilities, closed form vs sampling");
  int sel_n = 3, sel_nm = 2, sel_trials = 200000;
  std::string sel_ratios = "0.2,0.3,0.5";
  std::int64_t sel_seed = 7;
  sel->add_option("--n", sel_n, "number of layers");
  sel->add_option("--nm", sel_nm, "layers selected per round");
  sel->add_option("--ratios", sel_ratios, "comma-separated ratio vector");
  sel->add_option("--trials", sel_trials, "Monte Carlo trials");
  sel->add_option("--demo-seed", sel_seed, "sampling seed");

  auto* rep = app.add_subcommand("report", "pretty-print a run report");
  std::string report_path = "out/report.json";
  rep->add_option("--in", report_path, "report.json path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(opts);
    if (train->parsed()) return cmd_train(opts);
    if (eval->parsed()) return cmd_eval(opts, checkpoint_dir, tasks_csv);
    if (agg->parsed())
      return cmd_agg_demo(agg_clients, agg_len, static_cast<std::uint64_t>(agg_seed), agg_trials,
                          opts.as_json);
    if (sel->parsed())
      return cmd_select_demo(sel_n, sel_nm, sel_ratios, sel_trials,
                             static_cast<std::uint64_t>(sel_seed), opts.as_json);
    if (rep->parsed()) return cmd_report(report_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    const bool config_issue = e.code() == Err::ConfigError || e.code() == Err::IoError;
    return config_issue ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
