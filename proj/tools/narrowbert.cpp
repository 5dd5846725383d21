// narrowbert command-line driver.
//
// Exit codes: 0 success, 1 a check or run failed, 2 usage / parse error.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "narrowbert/bench.hpp"
#include "narrowbert/checkpoint.hpp"
#include "narrowbert/kernels.hpp"
#include "narrowbert/layout.hpp"
#include "narrowbert/random.hpp"
#include "narrowbert/training.hpp"
#include "narrowbert/verify.hpp"

namespace fs = std::filesystem;
using namespace narrowbert;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::string layout;
  std::string config;
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
  std::size_t batch = 0;
  std::size_t steps = 0;
  int precision = 32;
  int threads = 0;
  std::string out;
};

void print_parse_error(const std::string& text, const LayoutParseError& e) {
  std::cerr << e.what() << "\n  " << text << "\n  "
            << std::string(e.offset(), ' ') << "^\n";
}

// --- parse -----------------------------------------------------------------

int cmd_parse(const std::string& text, const ModelDims& dims,
              std::size_t seq_len, double mask) {
  Layout layout;
  try {
    layout = parse_layout(text);
  } catch (const LayoutParseError& e) {
    print_parse_error(text, e);
    return kUsage;
  }
  std::cout << "layout     " << text << "\n";
  std::cout << "canonical  " << render_layout(layout) << "\n";
  std::cout << "atoms      " << layout.atoms.size() << " (attention "
            << layout.count(AtomKind::Attention) << ", feedforward "
            << layout.count(AtomKind::Feedforward) << ")\n";
  std::cout << "narrow     ";
  if (auto n = layout.narrow_index()) {
    std::cout << "after atom " << *n << "\n";
  } else {
    std::cout << "none\n";
  }
  std::cout << "sequence   ";
  for (const auto& a : layout.atoms) std::cout << atom_symbol(a.kind);
  std::cout << "\n";
  for (Mode mode : {Mode::Pretrain, Mode::Classify}) {
    const auto v = validate_layout(layout, mode);
    std::cout << (mode == Mode::Pretrain ? "pretrain   " : "classify   ")
              << (v.empty() ? "valid" : v.front().message) << "\n";
  }
  const FlopReport report = estimate_flops(layout, dims, seq_len, mask);
  std::cout << "\nflops (d=" << dims.hidden << " ffn=" << dims.ffn
            << " L=" << seq_len << " active=" << active_rows(seq_len, mask)
            << ")\n";
  std::cout << "  #    atom          flops\n";
  for (const auto& a : report.per_atom) {
    std::cout << "  " << std::left << std::setw(4) << a.atom_index << " "
              << std::setw(12) << atom_name(layout.atoms[a.atom_index].kind)
              << std::right << std::setw(14) << a.flops << "\n";
  }
  std::cout << "  unnarrowed total " << report.total_full << "\n"
            << "  narrowed total   " << report.total_narrowed << "\n"
            << "  ratio            " << std::fixed << std::setprecision(4)
            << report.ratio << "\n";
  return kOk;
}

// --- pretrain --------------------------------------------------------------

TrainConfig resolve_config(const CommonFlags& f, const CLI::App& sub) {
  TrainConfig c;
  if (!f.config.empty()) c = load_config(f.config);
  if (sub.count("--layout")) c.layout = f.layout;
  if (sub.count("--seed")) c.seed = f.seed;
  if (sub.count("--seq-len")) c.seq_len = f.seq_len;
  if (sub.count("--batch")) c.micro_batch = f.batch;
  if (sub.count("--steps")) c.steps = f.steps;
  if (sub.count("--precision")) c.precision = f.precision;
  c.validate();
  return c;
}

template <typename T>
int run_pretrain(const TrainConfig& c, const fs::path& out) {
  const std::vector<std::string> lines =
      c.corpus.empty() ? toy_corpus(c.toy_lines, c.seed) : read_lines(c.corpus);
  PretrainData data = prepare_pretrain_data(lines, c);
  Encoder<T> model(model_dims(c, data.vocab.size()), parse_layout(c.layout),
                   c.seed);
  Adam<T> optimizer(model.parameters());
  fs::create_directories(out);
  std::ofstream log(out / "train_log.csv");
  std::ofstream dev(out / "dev_log.csv");
  dev << "step,dev_loss\n";
  {
    std::ofstream cfg(out / "config.txt");
    cfg << format_config(c);
  }
  std::cout << "vocab " << data.vocab.size() << " (ln V = " << std::fixed
            << std::setprecision(4) << std::log(data.vocab.size())
            << "), documents " << data.stream.documents() << ", parameters "
            << model.parameter_count() << ", layout "
            << render_layout(model.layout()) << "\n";
  TrainHooks hooks;
  hooks.log_csv = &log;
  hooks.on_eval = [&](const EvalRecord& r) {
    dev << r.step << ',' << std::setprecision(9) << r.dev_loss << '\n';
    std::cout << "step " << std::setw(6) << r.step << "  dev loss "
              << std::setprecision(4) << r.dev_loss << std::endl;
  };
  try {
    const TrainResult result = train_loop(model, optimizer, data.stream,
                                          data.dev, c, hooks);
    std::cout << "final train loss " << result.log.back().loss << ", "
              << std::setprecision(1) << result.log.back().tokens_per_sec
              << " tokens/s\n";
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kFailed;
  } catch (const NonFiniteGradient& e) {
    std::cerr << e.what() << "\n";
    return kFailed;
  }
  save_checkpoint(out / "model.nbrt", model, data.vocab, &optimizer);
  data.vocab.save(out / "vocab.txt");
  std::cout << "wrote " << (out / "model.nbrt").string() << "\n";
  return kOk;
}

// --- finetune --------------------------------------------------------------

template <typename T>
int run_finetune(const TrainConfig& c, const fs::path& checkpoint,
                 const fs::path& data_path, const fs::path& out) {
  LoadedModel<T> loaded = load_checkpoint<T>(checkpoint);
  const auto examples = read_labeled_tsv(data_path);
  if (examples.empty()) throw UsageError("no labeled examples in " + data_path.string());
  std::int32_t top = 0;
  for (const auto& ex : examples) top = std::max(top, ex.label);
  const std::size_t classes =
      std::max<std::size_t>(c.num_classes, static_cast<std::size_t>(top) + 1);
  if (loaded.model.num_classes() != classes) {
    loaded.model.add_classifier(classes, mix_seed(c.seed, 9));
  }
  if (auto v = validate_layout(loaded.model.layout(), Mode::Classify); !v.empty()) {
    throw UsageError("checkpoint layout cannot classify: " + v.front().message);
  }
  TrainConfig run = c;
  run.seq_len = std::min(c.seq_len, loaded.model.dims().max_len);
  const LabeledSet set = encode_labeled(examples, loaded.vocab);
  Adam<T> optimizer(loaded.model.parameters());
  fs::create_directories(out);
  std::ofstream log(out / "finetune_log.csv");
  TrainHooks hooks;
  hooks.log_csv = &log;
  const double before =
      classify_accuracy(loaded.model, set, run.seq_len, run.micro_batch);
  const FinetuneResult result =
      finetune_loop(loaded.model, optimizer, set, run, hooks);
  std::cout << std::fixed << std::setprecision(4) << "examples " << set.docs.size()
            << ", classes " << classes << ", layout "
            << render_layout(loaded.model.layout()) << "\n"
            << "train accuracy " << before << " -> " << result.train_accuracy
            << ", final loss " << result.log.back().loss << "\n";
  save_checkpoint(out / "finetuned.nbrt", loaded.model, loaded.vocab, &optimizer);
  return kOk;
}

// --- bench -----------------------------------------------------------------

const std::vector<std::string> kTableLayouts = {
    "{12,sf}",       "sfsf{10,s}:{10,f}", "{4,sf}:{8,sf}",
    "{3,sf}:{9,sf}", "{2,sf}:{10,sf}",    "{1,sf}:{11,sf}"};

int run_bench(BenchConfig config, const std::string& out, const std::string& svg) {
  const BenchReport report = run_benchmark(config);
  write_report_csv(report, std::cout);
  std::cout << "# " << report.note << "\n";
  if (!out.empty()) {
    emit_report(report, out,
                svg.empty() ? std::nullopt : std::optional<fs::path>(svg));
  }
  return kOk;
}

// --- checks ----------------------------------------------------------------

int run_eval_equiv(const verify::EquivOptions& opts) {
  bool ok = true;
  for (const auto& r : verify::run_equivalence_suite(opts)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(28)
              << r.name << std::right << " trials=" << r.trials;
    if (!r.passed) std::cout << "  " << r.detail;
    std::cout << "\n";
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailed;
}

int run_gradcheck(const verify::GradCheckOptions& opts, bool verbose) {
  bool ok = true;
  for (const auto& rep : verify::run_gradcheck_suite(opts)) {
    std::cout << (rep.passed() ? "PASS " : "FAIL ") << rep.variant << " "
              << rep.layout << "  worst rel error " << std::scientific
              << std::setprecision(2) << rep.worst() << std::defaultfloat
              << "\n";
    for (const auto& g : rep.groups) {
      if (verbose || !g.passed) {
        std::cout << "    " << (g.passed ? "ok   " : "FAIL ") << std::left
                  << std::setw(26) << g.name << std::right << std::scientific
                  << std::setprecision(2) << g.rel_error << std::defaultfloat
                  << "  (" << g.entries << " entries)\n";
      }
    }
    ok = ok && rep.passed();
  }
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NarrowBERT encoders: layout notation, training, benchmarks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "narrowbert 0.1");

  CommonFlags f;
  auto add_common = [&f](CLI::App* sub) {
    sub->add_option("--threads", f.threads,
                    "worker threads (default: NARROWBERT_THREADS or all cores)")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--seed", f.seed, "random seed");
  };
  auto add_run = [&f](CLI::App* sub) {
    sub->add_option("--layout", f.layout, "layout notation");
    sub->add_option("--config", f.config, "key = value config file")
        ->check(CLI::ExistingFile);
    sub->add_option("--seq-len", f.seq_len, "sequence length")
        ->check(CLI::PositiveNumber);
    sub->add_option("--batch", f.batch, "micro-batch size")
        ->check(CLI::PositiveNumber);
    sub->add_option("--steps", f.steps, "optimizer steps")
        ->check(CLI::PositiveNumber);
    sub->add_option("--precision", f.precision, "32 or 64")
        ->check(CLI::IsMember({32, 64}));
    sub->add_option("--out", f.out, "output directory");
  };

  // parse
  auto* parse = app.add_subcommand("parse", "expand a layout and estimate FLOPs");
  std::string notation;
  ModelDims pdims{768, 12, 3072, 30522, 512, 1e-12};
  std::size_t p_len = 512;
  double p_mask = 0.15;
  parse->add_option("notation", notation, "layout, e.g. \"{2,sf}:{10,sf}\"")
      ->required();
  parse->add_option("--hidden", pdims.hidden, "hidden size")->capture_default_str();
  parse->add_option("--ffn", pdims.ffn, "feedforward inner size")->capture_default_str();
  parse->add_option("--seq-len", p_len, "sequence length")->capture_default_str()
      ->check(CLI::PositiveNumber);
  parse->add_option("--mask", p_mask, "active fraction after ':'")
      ->capture_default_str()->check(CLI::Range(1e-9, 1.0));

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "MLM pretraining");
  add_common(pretrain);
  add_run(pretrain);

  // finetune
  auto* finetune = app.add_subcommand("finetune", "train a [CLS] classifier");
  add_common(finetune);
  add_run(finetune);
  std::string ckpt, tsv;
  finetune->add_option("--checkpoint", ckpt, "pretrained model")
      ->required()->check(CLI::ExistingFile);
  finetune->add_option("--data", tsv, "labeled TSV: text<TAB>label")
      ->required()->check(CLI::ExistingFile);

  // bench
  auto* bench = app.add_subcommand("bench", "time layouts against the first");
  add_common(bench);
  BenchConfig bc;
  std::vector<std::string> bench_layouts;
  std::string bench_mode = "pretrain-step", bench_out, bench_svg;
  bench->add_option("--layout", bench_layouts,
                    "layouts to compare; the first is the baseline "
                    "(default: {12,sf}, sfsf{10,s}:{10,f}, {k,sf}:{12-k,sf} for k = 4..1)");
  bench->add_option("--mode", bench_mode)
      ->check(CLI::IsMember({"pretrain-step", "inference-forward",
                             "classify-forward", "classify-step"}))
      ->capture_default_str();
  bench->add_option("--seq-len", bc.seq_len)->capture_default_str()
      ->check(CLI::PositiveNumber);
  bench->add_option("--batch", bc.batch)->capture_default_str()
      ->check(CLI::PositiveNumber);
  bench->add_option("--precision", bc.precision)->check(CLI::IsMember({32, 64}))
      ->capture_default_str();
  bench->add_option("--iterations", bc.iterations)->capture_default_str();
  bench->add_option("--warmup", bc.warmup)->capture_default_str();
  bench->add_option("--hidden", bc.dims.hidden)->capture_default_str();
  bench->add_option("--heads", bc.dims.heads)->capture_default_str();
  bench->add_option("--ffn", bc.dims.ffn)->capture_default_str();
  bench->add_option("--vocab", bc.dims.vocab)->capture_default_str();
  bench->add_option("--mask", bc.mask_fraction)->capture_default_str()
      ->check(CLI::Range(1e-9, 1.0));
  bench->add_option("--out", bench_out, "CSV report path");
  bench->add_option("--svg", bench_svg, "optional SVG bar chart path");

  // eval-equiv
  auto* equiv = app.add_subcommand("eval-equiv", "narrowed vs wide oracles");
  add_common(equiv);
  verify::EquivOptions eo;
  equiv->add_option("--trials", eo.trials)->capture_default_str()
      ->check(CLI::PositiveNumber);

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradients");
  add_common(grad);
  bool grad_verbose = false;
  grad->add_flag("-v,--verbose", grad_verbose, "print every parameter group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    // Zero defers to NARROWBERT_THREADS, then the OpenMP default.
    kernels::set_threads(kernels::resolve_threads(f.threads));

    if (*parse) {
      pdims.heads = 1;
      pdims.max_len = std::max(pdims.max_len, p_len);
      return cmd_parse(notation, pdims, p_len, p_mask);
    }
    if (*pretrain || *finetune) {
      CLI::App& sub = *pretrain ? *pretrain : *finetune;
      const TrainConfig c = resolve_config(f, sub);
      parse_layout(c.layout);
      const fs::path out = f.out.empty() ? fs::path(*pretrain ? "run" : "finetune")
                                         : fs::path(f.out);
      if (*pretrain) {
        return c.precision == 64 ? run_pretrain<double>(c, out)
                                 : run_pretrain<float>(c, out);
      }
      return c.precision == 64 ? run_finetune<double>(c, ckpt, tsv, out)
                               : run_finetune<float>(c, ckpt, tsv, out);
    }
    if (*bench) {
      bc.layouts = bench_layouts.empty() ? kTableLayouts : bench_layouts;
      bc.mode = *parse_bench_mode(bench_mode);
      bc.dims.max_len = std::max(bc.dims.max_len, bc.seq_len);
      if (bench->count("--seed")) bc.seed = f.seed;
      for (const auto& l : bc.layouts) parse_layout(l);
      return run_bench(bc, bench_out, bench_svg);
    }
    if (*equiv) {
      if (equiv->count("--seed")) eo.seed = f.seed;
      return run_eval_equiv(eo);
    }
    if (*grad) {
      verify::GradCheckOptions go;
      if (grad->count("--seed")) go.seed = f.seed;
      return run_gradcheck(go, grad_verbose);
    }
  } catch (const LayoutParseError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
