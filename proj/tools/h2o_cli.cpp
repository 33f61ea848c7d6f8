// Command-line front end: gen-data, train, eval, diagnose, verify-theory, plot.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "h2o/harness.hpp"
#include "h2o/theory.hpp"

using namespace h2o;
namespace fs = std::filesystem;

namespace {

// Exit codes by failure category.
enum Exit : int { ok = 0, other = 1, config = 2, io = 3, input = 4, numerical = 5, counterexample = 6 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string variant;
  std::string gap;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "config file (key = value lines)");
  app->add_option("--seed", c.seed, "master seed (overrides the config)");
  app->add_option("--out", c.out, "output path");
  app->add_option("--variant", c.variant, "algorithm: sac, cql, darc, darc_plus, h2o, h2o_v");
  app->add_option("--gap", c.gap, "sim gap: none, gravity, friction, joint_noise, velocity_noise");
}

harness::ExperimentConfig resolve(const Common& c) {
  harness::ExperimentConfig cfg = c.config_path.empty() ? harness::ExperimentConfig{}
                                                        : harness::load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.variant.empty()) harness::set_config_value(cfg, "variant.algorithm", c.variant);
  if (!c.gap.empty()) harness::set_config_value(cfg, "env.gap", c.gap);
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

std::vector<data::Transition> dataset_for(const harness::ExperimentConfig& cfg, const std::string& path) {
  if (!path.empty()) return data::load_dataset(path);
  return harness::build_dataset(cfg).transitions;
}

int cmd_gen_data(const Common& c) {
  auto cfg = resolve(c);
  auto build = harness::build_dataset(cfg);
  const fs::path path = c.out.empty() ? fs::path("dataset.csv") : fs::path(c.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::save_dataset(path.string(), build.transitions);
  std::cout << "wrote " << build.transitions.size() << " transitions to " << path.string() << '\n';
  if (cfg.protocol == harness::DatasetProtocol::medium || cfg.protocol == harness::DatasetProtocol::medium_replay)
    std::cout << "behaviour: random " << build.random_return << ", best " << build.converged_return << ", threshold "
              << build.threshold << ", chosen step " << build.chosen_step << " (return " << build.chosen_return
              << ")\n";
  return ok;
}

int cmd_train(const Common& c, const std::string& dataset_path) {
  auto cfg = resolve(c);
  if (cfg.out_dir.empty()) cfg.out_dir = "run";
  harness::RunResult r;
  if (cfg.variant.uses_real_for_training() || cfg.variant.uses_discriminators())
    r = harness::run_experiment(cfg, dataset_for(cfg, dataset_path));
  else
    r = harness::run_experiment(cfg, {});
  std::cout << agents::to_string(cfg.variant.algorithm) << " / " << envs::to_string(cfg.gap) << " / seed " << cfg.seed
            << ": final return " << r.report.final_return_mean() << " +- " << r.report.final_return_std() << '\n';
  std::cout << "outputs in " << cfg.out_dir << '\n';
  return ok;
}

int cmd_eval(const Common& c, const std::string& checkpoint, int episodes) {
  auto cfg = resolve(c);
  auto nets = harness::load_checkpoint(checkpoint);
  auto it = nets.find("actor");
  if (it == nets.end()) throw IoError("checkpoint has no actor");
  auto e = harness::evaluate_policy(cfg.real_env, it->second, cfg.agent.max_action,
                                    episodes > 0 ? episodes : cfg.eval_episodes, cfg.seed);
  std::cout << "return " << e.mean << " +- " << e.std << " over " << e.returns.size() << " episodes\n";
  return ok;
}

int cmd_diagnose(const Common& c, const std::string& checkpoint, const std::string& dataset_path, int probes) {
  auto cfg = resolve(c);
  auto nets = harness::load_checkpoint(checkpoint);
  for (const char* k : {"actor", "critic1", "critic2", "disc_sa", "disc_sas"})
    if (!nets.count(k)) throw IoError(std::string("checkpoint has no ") + k);
  agents::AgentState ag;
  ag.cfg = cfg.agent;
  ag.actor = nets["actor"];
  ag.critic1 = nets["critic1"];
  ag.critic2 = nets["critic2"];
  gap::DiscriminatorPair pair;
  pair.state_dim = cfg.agent.obs_dim;
  pair.action_dim = cfg.agent.act_dim;
  pair.d_sa = nets["disc_sa"];
  pair.d_sas = nets["disc_sas"];
  auto real = dataset_for(cfg, dataset_path);
  auto cov = data::state_covariance(real);

  const auto sim_env = envs::make_gap_variant(cfg.real_env, cfg.gap);
  data::PolicyFn policy = [&](const Eigen::VectorXd& obs) {
    return Eigen::VectorXd(
        agents::policy_deterministic(ag.actor, Eigen::MatrixXd(obs.transpose()), cfg.agent.max_action)
            .action.row(0)
            .transpose());
  };
  auto sim = data::collect_dataset(sim_env, policy, static_cast<std::size_t>(probes), 0.3, cfg.seed ^ 0x7072U,
                                   data::Domain::sim);
  Rng rng = Rng::stream(cfg.seed, "diagnose");
  auto rows = harness::gap_diagnostic(ag, pair, cov, data::Batch::from(sim), cfg.variant.gap_samples, rng);
  const fs::path out = c.out.empty() ? fs::path("diagnostic.csv") : fs::path(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  harness::write_diagnostic_csv(rows, out);
  auto q = harness::quartile_means(rows);
  std::cout << "mean u, bottom speed quartile " << q.bottom_u << ", top quartile " << q.top_u << '\n';
  return ok;
}

int cmd_verify_theory(const Common& c, int instances, int states, int actions, double gap_scale,
                      std::vector<double> betas) {
  const std::uint64_t seed0 = c.seed.value_or(0);
  std::ofstream file;
  std::ostream* out = &std::cout;
  if (!c.out.empty()) {
    file.open(c.out);
    if (!file) throw IoError("cannot write " + c.out);
    out = &file;
  }
  int violations = 0;
  for (double beta : betas)
    for (int i = 0; i < instances; ++i) {
      auto res = theory::run_instance(seed0 + static_cast<std::uint64_t>(i), states, actions, gap_scale, beta);
      *out << res.line() << '\n';
      violations += res.report.violations();
    }
  std::cerr << "counterexamples: " << violations << '\n';
  return violations == 0 ? ok : counterexample;
}

int cmd_plot(const Common& c, const std::vector<std::string>& inputs, const std::string& title) {
  std::vector<harness::Curve> curves;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    harness::Curve cv;
    cv.label = fs::path(path).parent_path().filename().string();
    for (const auto& p : harness::read_metrics_csv(in)) {
      cv.x.push_back(static_cast<double>(p.step));
      cv.y.push_back(p.return_mean);
    }
    curves.push_back(std::move(cv));
  }
  harness::write_text(c.out.empty() ? fs::path("curves.svg") : fs::path(c.out), harness::render_svg(curves, title));
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid offline/online RL experiments on the pendulum"};
  app.require_subcommand(1);

  Common gen, train, eval, diag, theo, plot;
  std::string train_dataset, diag_dataset, eval_checkpoint, diag_checkpoint, plot_title = "return";
  int eval_episodes = 0, diag_probes = 1024;
  int t_instances = 20, t_states = 10, t_actions = 3;
  double t_gap = 0.5;
  std::vector<double> t_betas{0.1, 1.0};
  std::vector<std::string> plot_inputs;

  auto* g = app.add_subcommand("gen-data", "build an offline dataset");
  add_common(g, gen);
  auto* t = app.add_subcommand("train", "run one experiment");
  add_common(t, train);
  t->add_option("--dataset", train_dataset, "offline dataset file");
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint in the real environment");
  add_common(e, eval);
  e->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();
  e->add_option("--episodes", eval_episodes, "episodes (default: run.eval_episodes)");
  auto* d = app.add_subcommand("diagnose", "u(s,a) against |theta_dot| on sim probes");
  add_common(d, diag);
  d->add_option("--checkpoint", diag_checkpoint, "checkpoint directory")->required();
  d->add_option("--dataset", diag_dataset, "offline dataset file (for the covariance)");
  d->add_option("--probes", diag_probes, "number of probe transitions");
  auto* v = app.add_subcommand("verify-theory", "tabular underestimation checks");
  add_common(v, theo);
  v->add_option("--instances", t_instances, "instances per beta");
  v->add_option("--states", t_states, "states");
  v->add_option("--actions", t_actions, "actions");
  v->add_option("--gap-scale", t_gap, "sim/real mixing scale in [0,1]");
  v->add_option("--beta", t_betas, "beta values");
  auto* p = app.add_subcommand("plot", "overlay learning curves from metrics files");
  add_common(p, plot);
  p->add_option("inputs", plot_inputs, "metrics.csv files")->required();
  p->add_option("--title", plot_title, "chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? ok : config;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(train, train_dataset);
    if (*e) return cmd_eval(eval, eval_checkpoint, eval_episodes);
    if (*d) return cmd_diagnose(diag, diag_checkpoint, diag_dataset, diag_probes);
    if (*v) return cmd_verify_theory(theo, t_instances, t_states, t_actions, t_gap, t_betas);
    if (*p) return cmd_plot(plot, plot_inputs, plot_title);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return config;
  } catch (const IoError& err) {
    std::cerr << "i/o error: " << err.what() << '\n';
    return io;
  } catch (const NumericalFailure& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return numerical;
  } catch (const InvalidInput& err) {
    std::cerr << "invalid input: " << err.what() << '\n';
    return input;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return other;
  }
  return other;
}
