#include <CLI11.hpp>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "pnml/experiment.hpp"

namespace ex = pnml::experiment;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::size_t workers = 1;
  std::optional<std::size_t> limit;
};

void add_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "Base seed; overrides the config");
  sub->add_option("--out", f.out, "Output directory; overrides the config");
  sub->add_option("--workers", f.workers, "Parallel per-sample workers")->check(CLI::PositiveNumber);
  sub->add_option("--limit", f.limit, "Number of test samples; overrides test_size")
      ->check(CLI::PositiveNumber);
}

ex::ExperimentConfig resolve(const Flags& f) {
  auto cfg = ex::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.output_dir = *f.out;
  if (f.limit) cfg.test_size = *f.limit;
  cfg.validate();
  return cfg;
}

void print_summary(const ex::EvalSummary& s) {
  std::cout << "n=" << s.n << " erm_acc=" << s.erm_accuracy << " pnml_acc=" << s.pnml_accuracy
            << " erm_loss=" << s.erm_loss.mean << " pnml_loss=" << s.pnml_loss.mean
            << " genie_loss=" << s.genie_loss.mean << " regret=" << s.regret.mean << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predictive normalized maximum likelihood experiments"};
  app.require_subcommand(1);
  Flags flags;
  const std::pair<const char*, const char*> commands[] = {
      {"train", "Train the ERM model and report accuracy"},
      {"pnml", "pNML vs ERM vs genie on the test subset"},
      {"random-labels", "Sweep the fraction of randomized train labels"},
      {"ood", "Separate test inputs from Gaussian noise by score"},
      {"adv", "Black-box FGSM attack sweep"},
      {"twice-universal", "Combine several hypothesis classes"},
  };
  for (const auto& [name, help] : commands) add_flags(app.add_subcommand(name, help), flags);
  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = resolve(flags);
    const ex::RunOptions opt{flags.workers, &std::cerr};
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "train") {
      const auto r = ex::run_train(cfg, opt);
      std::cout << "train_acc=" << r.train.accuracy << " test_acc=" << r.test.accuracy << '\n';
    } else if (cmd == "pnml") {
      print_summary(ex::run_pnml_eval(cfg, opt).summary);
    } else if (cmd == "random-labels") {
      for (const auto& row : ex::run_random_labels(cfg, opt)) {
        std::cout << "p=" << row.p << " epochs=" << row.epochs_run
                  << (row.reached_full_fit ? "" : " (epoch cap)") << ' ';
        print_summary(row.summary);
      }
    } else if (cmd == "ood") {
      for (const auto& row : ex::run_ood_eval(cfg, opt)) {
        std::cout << row.method << " d_kl=" << row.sep.d_kl << " d_lrt=" << row.sep.lrt.distance << '\n';
      }
    } else if (cmd == "adv") {
      for (const auto& row : ex::run_adv_eval(cfg, opt)) {
        std::cout << "eps=" << row.epsilon << ' ';
        print_summary(row.summary);
      }
    } else {
      const auto r = ex::run_twice_universal(cfg, opt);
      for (const auto& c : r.classes) {
        std::cout << c.name << ": acc=" << c.accuracy << " loss=" << c.mean_loss << '\n';
      }
      std::cout << "combined: acc=" << r.combined.accuracy << " loss=" << r.combined.mean_loss << '\n';
    }
    std::cout << "results in " << cfg.output_dir << '\n';
  } catch (const pnml::Error& e) {
    std::cerr << "pnml: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pnml: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
