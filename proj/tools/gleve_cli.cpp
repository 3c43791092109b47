// Command-line front end: phantom generation, grounding, training,
// evaluation and a numeric self-test.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <queue>

#include <CLI11.hpp>

#include "gleve/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gleve;

namespace {

PipelineConfig config_from(const std::string& path, std::uint64_t seed) {
  PipelineConfig cfg;
  if (!path.empty()) cfg = load_config_file(path);
  if (seed != 0) cfg.set_seed(seed);
  return cfg;
}

std::vector<LoadedCase> load_cases(const std::string& suite_dir) {
  std::vector<LoadedCase> cases;
  for (const std::string& dir : list_suite(suite_dir)) {
    cases.push_back(load_case(dir));
  }
  return cases;
}

int cmd_phantom(const std::string& suite_name, const std::string& out,
                double mask_ratio, std::uint64_t seed) {
  auto specs = suite(suite_name, seed, mask_ratio);
  write_suite(specs, out);
  std::cout << "wrote " << specs.size() << " cases to " << out << "\n";
  return 0;
}

int cmd_ground(const std::string& case_dir, const std::string& params_path,
               const std::string& config_path, const std::string& out,
               std::uint64_t seed) {
  PipelineConfig cfg = config_from(config_path, seed);
  ParamStore ps;
  if (!params_path.empty()) {
    ps = ParamStore::load(params_path);
  } else {
    init_all_params(ps, cfg);
  }
  LoadedCase c = load_case(case_dir);
  GroundingResult res = ground(c, ps, cfg);
  write_grounding(res, c, cfg, out);
  std::cout << "grounded " << res.lesions.size() << " lesions; losses: total="
            << res.losses.total << " weak=" << res.losses.weak << "\n";
  return 0;
}

int cmd_train(const std::string& suite_dir, int steps,
              const std::string& config_path, const std::string& out,
              std::uint64_t seed) {
  PipelineConfig cfg = config_from(config_path, seed);
  auto cases = load_cases(suite_dir);
  TrainResult res = train(cases, cfg, steps);
  res.params.save(out);
  const fs::path csv = fs::path(out).parent_path() / "loss_trace.csv";
  std::ofstream(csv) << res.loss_csv;
  std::cout << "trained " << steps << " steps; checkpoint " << out
            << "; final eval LR=" << res.eval_trace.back().lr_metric
            << " LLS=" << res.eval_trace.back().lls_metric << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& report_json, const std::string& config_path) {
  PipelineConfig cfg = config_from(config_path, 0);
  std::vector<CaseEval> evals;
  std::vector<LoadedCase> cases;
  for (const std::string& dir : list_suite(gt_dir)) {
    LoadedCase c = load_case(dir);
    const std::string name = fs::path(dir).filename().string();
    Mask3 pred = read_mask(pred_dir + "/" + name + "/pred_union.mask");
    evals.push_back(evaluate_case(c, pred, cfg));
    cases.push_back(std::move(c));
  }
  std::ofstream(report_json) << eval_report_json(evals, cases);
  std::cout << "evaluated " << evals.size() << " cases -> " << report_json
            << "\n";
  return 0;
}

// compact numeric self-test: component labeling vs BFS, assignment vs
// brute force, one gradient check through the verifier path
int cmd_selftest() {
  Rng rng(7);
  // components vs BFS flood fill
  for (int trial = 0; trial < 40; ++trial) {
    Mask3 m(5, 5, 5);
    for (auto& v : m.data) v = rng.uniform() < 0.35 ? 1 : 0;
    auto comps = connected_components(m, 26);
    std::vector<int> label(std::size_t(m.voxels()), -1);
    int next = 0;
    for (std::int64_t s = 0; s < m.voxels(); ++s) {
      if (!m.data[std::size_t(s)] || label[std::size_t(s)] >= 0) continue;
      std::queue<std::int64_t> q;
      q.push(s);
      label[std::size_t(s)] = next;
      while (!q.empty()) {
        std::int64_t cur = q.front();
        q.pop();
        const int z = int(cur % 5), y = int((cur / 5) % 5), x = int(cur / 25);
        for (int dx = -1; dx <= 1; ++dx)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dz = -1; dz <= 1; ++dz) {
              const int px = x + dx, py = y + dy, pz = z + dz;
              if (px < 0 || px >= 5 || py < 0 || py >= 5 || pz < 0 || pz >= 5)
                continue;
              const std::int64_t ni = m.vox_index(px, py, pz);
              if (m.data[std::size_t(ni)] && label[std::size_t(ni)] < 0) {
                label[std::size_t(ni)] = next;
                q.push(ni);
              }
            }
      }
      ++next;
    }
    if (int(comps.size()) != next) {
      std::cerr << "selftest: component count mismatch\n";
      return 4;
    }
  }
  // assignment vs brute force (n = 3)
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::vector<double>> cost(3, std::vector<double>(3));
    for (auto& row : cost)
      for (double& c : row) c = rng.uniform();
    auto assign = hungarian(cost);
    double got = 0.0;
    for (int i = 0; i < 3; ++i) got += cost[std::size_t(i)][std::size_t(assign[std::size_t(i)])];
    double best = 1e9;
    std::vector<int> perm{0, 1, 2};
    do {
      double tot = 0.0;
      for (int i = 0; i < 3; ++i) tot += cost[std::size_t(i)][std::size_t(perm[std::size_t(i)])];
      best = std::min(best, tot);
    } while (std::next_permutation(perm.begin(), perm.end()));
    if (std::abs(got - best) > 1e-9) {
      std::cerr << "selftest: assignment not optimal\n";
      return 4;
    }
  }
  // gradient check through softmax entropy of scores
  {
    std::vector<double> theta{0.3, -0.2, 0.7, 0.1};
    DiffProbe probe;
    probe.value = [](const std::vector<double>& th) {
      ad::Tape t;
      ad::Val s = t.leaf(ad::Tensor({int(th.size())}, th));
      ad::Val p = t.segment_softmax(s, std::vector<int>(th.size(), 0));
      ad::Val ent = t.mul_scalar(
          t.sum(t.mul(p, t.log_(t.add_scalar(p, 1e-8)))), -1.0);
      return t.scalar_value(ent);
    };
    probe.gradient = [](const std::vector<double>& th) {
      ad::Tape t;
      ad::Val s = t.leaf(ad::Tensor({int(th.size())}, th));
      ad::Val p = t.segment_softmax(s, std::vector<int>(th.size(), 0));
      ad::Val ent = t.mul_scalar(
          t.sum(t.mul(p, t.log_(t.add_scalar(p, 1e-8)))), -1.0);
      t.backward(ent);
      return t.grad(s).v;
    };
    if (grad_check(probe, theta, 1e-5) > 1e-4) {
      std::cerr << "selftest: gradient check failed\n";
      return 4;
    }
  }
  std::cout << "selftest ok\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lesion report grounding pipeline"};
  app.require_subcommand(1);

  std::string suite_name = "easy", out_dir = "out", case_dir, params_path,
              config_path, pred_dir, gt_dir, train_suite_dir,
              report_json = "metrics.json";
  double mask_ratio = 1.0;
  std::uint64_t seed = 0;
  int steps = 500;

  auto* gen = app.add_subcommand("phantom", "generate a phantom suite");
  gen->add_option("--suite", suite_name, "easy|multi|small|weak");
  gen->add_option("--out", out_dir)->required();
  gen->add_option("--mask-ratio", mask_ratio);
  gen->add_option("--seed", seed);

  auto* gr = app.add_subcommand("ground", "ground one case");
  gr->add_option("--case", case_dir)->required();
  gr->add_option("--params", params_path);
  gr->add_option("--config", config_path);
  gr->add_option("--out", out_dir)->required();
  gr->add_option("--seed", seed);

  auto* tr = app.add_subcommand("train", "train on a phantom suite");
  tr->add_option("--suite", train_suite_dir)->required();
  tr->add_option("--steps", steps);
  tr->add_option("--config", config_path);
  tr->add_option("--out", out_dir)->required();
  tr->add_option("--seed", seed);

  auto* ev = app.add_subcommand("eval", "score predictions against GT");
  ev->add_option("--pred", pred_dir)->required();
  ev->add_option("--gt", gt_dir)->required();
  ev->add_option("--report-json", report_json);
  ev->add_option("--config", config_path);

  app.add_subcommand("selftest", "run built-in numeric checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_phantom(suite_name, out_dir, mask_ratio, seed ? seed : 2026);
    if (gr->parsed()) return cmd_ground(case_dir, params_path, config_path, out_dir, seed);
    if (tr->parsed()) return cmd_train(train_suite_dir, steps, config_path, out_dir, seed);
    if (ev->parsed()) return cmd_eval(pred_dir, gt_dir, report_json, config_path);
    return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
}
