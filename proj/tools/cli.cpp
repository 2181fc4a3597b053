#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "dualnet/architectures.hpp"
#include "dualnet/io.hpp"
#include "dualnet/projest.hpp"
#include "dualnet/trainer.hpp"

namespace dualnet::cli {

namespace fs = std::filesystem;

namespace {

/// Flag combination rejected after parsing; exit code 2.
class FlagError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

BallNorm norm_from(const std::string& s) { return s == "l2" ? BallNorm::l2 : BallNorm::linf; }

struct TrainFlags {
  std::string arch;
  std::string data;
  double epsilon = 0.1;
  std::string norm = "linf";
  std::size_t projection = 0;
  bool exact = false;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t batch_size = 50;
  double lr = 1e-3;
  std::size_t stages = 2;
};

struct CertifyFlags {
  std::string model;
  std::string data;
  std::optional<double> epsilon;
  std::optional<std::string> norm;
  std::string mode = "exact";
  std::uint64_t seed = 0;
  std::string out;
};

struct PredictFlags {
  std::string model;
  std::string cascade;
  std::string input;
  std::optional<double> epsilon;
  std::optional<std::string> norm;
  std::string mode = "exact";
  std::uint64_t seed = 0;
};

struct BenchFlags {
  std::vector<std::size_t> r{10, 50, 100};
  std::size_t trials = 1000;
  std::vector<std::size_t> sizes{100, 1000};
  std::uint64_t seed = 0;
  std::string out;
};

struct ConvertFlags {
  double dim = 0;
  double epsilon_inf = 0;
};

std::string mode_check(const std::string& s) {
  std::string why;
  return parse_mode(s, &why) ? std::string() : why;
}

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--arch", f.arch, "mlp:A-B-...-K, conv-small, wide:K or deep:K")
      ->required()
      ->check([](const std::string& s) {
        try {
          parse_arch(s);
          return std::string();
        } catch (const std::exception& e) {
          return std::string(e.what());
        }
      });
  cmd->add_option("--data", f.data, "IDX directory or CSV file")->required();
  cmd->add_option("--epsilon", f.epsilon, "Ball radius")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--norm", f.norm, "Ball norm")->check(CLI::IsMember({"linf", "l2"}))->capture_default_str();
  auto* proj = cmd->add_option("--projection", f.projection, "Train with R random projections")
                   ->check(CLI::PositiveNumber);
  auto* exact = cmd->add_flag("--exact", f.exact, "Train with exact bounds (default)");
  proj->excludes(exact);
  cmd->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--seed", f.seed, "Seed")->capture_default_str();
  cmd->add_option("--out", f.out, "Output directory")->required();
  cmd->add_option("--batch-size", f.batch_size, "Minibatch size")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
}

TrainConfig train_config(const TrainFlags& f, std::size_t threads) {
  TrainConfig cfg;
  cfg.optimizer = OptimizerConfig::adam(f.lr);
  cfg.batch_size = f.batch_size;
  cfg.epochs = f.epochs;
  cfg.eps_end = f.epsilon;
  cfg.eps_start = std::min(0.01, f.epsilon);
  cfg.eps_warmup_epochs = f.epochs / 2;
  cfg.norm = norm_from(f.norm);
  cfg.estimator = f.projection > 0 ? BoundEstimator::projected(f.projection) : BoundEstimator::exact_bounds();
  cfg.seed = f.seed;
  cfg.threads = threads;
  cfg.eval_limit = 1000;
  cfg.validate();
  return cfg;
}

std::size_t class_count(const DataSplits& d) {
  return std::max(d.train.classes, d.test ? d.test->classes : std::size_t{0});
}

std::string epoch_line(const EpochMetrics& m) {
  return "epoch=" + std::to_string(m.epoch + 1) + " eps=" + fmt("%.6g", m.eps) + " loss=" + fmt("%.6g", m.train_loss) +
         " train_robust_error=" + fmt("%.4f", m.train_robust_error) +
         " test_robust_error=" + fmt("%.4f", m.test_robust_error);
}

std::string summary_line(double robust, double standard, std::size_t n) {
  return "robust_error=" + fmt("%.6f", robust) + " standard_error=" + fmt("%.6f", standard) +
         " n=" + std::to_string(n);
}

int cmd_train(const TrainFlags& f, std::size_t threads, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = train_config(f, threads);
  DataSplits data = load_data(f.data);
  const std::size_t classes = class_count(data);
  data.train.classes = classes;
  if (data.test) data.test->classes = classes;
  NetworkGraph net = build_network(parse_arch(f.arch), data.train.dim(), classes, f.seed);
  TrainResult r = train(net, data.train, data.test ? &*data.test : nullptr, cfg,
                        [&](const EpochMetrics& m) { out << epoch_line(m) << "\n" << std::flush; });
  fs::create_directories(f.out);
  io::ModelMeta meta{f.norm, f.epsilon, f.seed, f.arch};
  io::save_model(fs::path(f.out) / "model.json", r.net, meta);
  io::write_metrics(r.metrics, fs::path(f.out) / "metrics.csv");
  out << "model=" << (fs::path(f.out) / "model.json").string() << "\n";
  if (r.diverged) {
    err << "error: training diverged: " << *r.diverged << "\n";
    return 1;
  }
  return 0;
}

int cmd_cascade_train(const TrainFlags& f, std::size_t threads, std::ostream& out) {
  TrainConfig cfg = train_config(f, threads);
  cfg.evaluate = false;
  DataSplits data = load_data(f.data);
  const std::size_t classes = class_count(data);
  data.train.classes = classes;
  const ArchSpec arch = parse_arch(f.arch);
  std::vector<NetworkGraph> stages;
  for (std::size_t s = 0; s < f.stages; ++s) {
    stages.push_back(build_network(arch, data.train.dim(), classes, s == 0 ? f.seed : derive_seed(f.seed, s)));
  }
  std::vector<std::vector<EpochMetrics>> metrics;
  Cascade c = cascade_train(stages, data.train, cfg, [&](const EpochMetrics& m) {
    if (m.epoch == 0) metrics.emplace_back();
    metrics.back().push_back(m);
    out << "stage=" << metrics.size() - 1 << " " << epoch_line(m) << "\n" << std::flush;
  });
  io::save_cascade(f.out, c, io::ModelMeta{f.norm, f.epsilon, f.seed, f.arch});
  for (std::size_t s = 0; s < metrics.size(); ++s) {
    io::write_metrics(metrics[s], fs::path(f.out) / ("metrics_stage_" + std::to_string(s) + ".csv"));
  }
  for (std::size_t s = 0; s < c.stages.size(); ++s) {
    out << "stage=" << s << " trained_on=" << c.trained_on[s] << " certified=" << c.certified[s] << "\n";
  }
  if (data.test) {
    CascadeError e = cascade_error(c, *data.test, Ball{norm_from(f.norm), f.epsilon}, {}, threads);
    out << summary_line(e.robust_error, e.standard_error, e.n) << "\n";
  }
  return 0;
}

void print_plan(const TailPlan& p, std::ostream& out) {
  out << "tail_plan N=" << p.count << " delta_hat=" << fmt("%.6g", p.delta_hat) << " k=" << p.k
      << " eps_tail=" << fmt("%.6g", p.eps_tail) << "\n";
}

int cmd_certify(const CertifyFlags& f, std::size_t threads, std::ostream& out) {
  io::LoadedModel m = io::load_model(f.model);
  DataSplits data = load_data(f.data);
  const Dataset& set = data.test ? *data.test : data.train;
  CertifyOptions opts = *parse_mode(f.mode);
  opts.seed = f.seed;
  const Ball ball{norm_from(f.norm.value_or(m.meta.norm)), f.epsilon.value_or(m.meta.epsilon)};
  if (opts.mode == BoundMode::high_prob && ball.norm != BallNorm::linf) {
    throw std::invalid_argument("high-probability certificates need an linf ball");
  }
  if (set.size() == 0) throw std::invalid_argument("no examples in " + f.data);
  RobustErrorResult r = robust_error(m.net, set.features, set.labels, ball, opts, threads);
  if (opts.mode == BoundMode::high_prob && !r.certificates.empty() && r.certificates.front().plan) {
    print_plan(*r.certificates.front().plan, out);
  }
  if (!f.out.empty()) io::write_certificates(r.certificates, f.out);
  out << summary_line(r.robust_error, r.standard_error, r.n) << "\n";
  return 0;
}

std::vector<std::vector<double>> read_inputs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io::IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      while (end && (*end == ' ' || *end == '\r')) ++end;
      if (end == cell.c_str() || *end != '\0') {
        throw io::IoError(path.string() + ":" + std::to_string(line_no) + ": invalid number '" + cell + "'");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_predict(const PredictFlags& f, std::ostream& out) {
  Cascade cascade;
  io::ModelMeta meta;
  if (!f.model.empty()) {
    io::LoadedModel m = io::load_model(f.model);
    cascade.stages.push_back(m.net);
    meta = m.meta;
  } else {
    cascade = io::load_cascade(f.cascade);
    meta = io::load_model(fs::path(f.cascade) / "stage_0.json").meta;
    meta.epsilon = *std::max_element(cascade.eps.begin(), cascade.eps.end());
  }
  CertifyOptions opts = *parse_mode(f.mode);
  opts.seed = f.seed;
  const Ball ball{norm_from(f.norm.value_or(meta.norm)), f.epsilon.value_or(meta.epsilon)};
  if (opts.mode == BoundMode::high_prob && ball.norm != BallNorm::linf) {
    throw std::invalid_argument("high-probability certificates need an linf ball");
  }
  const std::size_t d = cascade.stages.front().input_size();
  const auto rows = read_inputs(f.input);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) {
      throw std::invalid_argument("input row " + std::to_string(i + 1) + " has " + std::to_string(rows[i].size()) +
                                  " values, the model expects " + std::to_string(d));
    }
  }
  for (const auto& row : rows) {
    CascadeAnswer a = cascade_predict(cascade, Tensor::vector(row), ball, opts);
    if (a.label == NO_CERTIFICATE) {
      out << "NO_CERTIFICATE\n";
    } else {
      out << a.label << "\n";
    }
  }
  return 0;
}

int cmd_estimate_bench(const BenchFlags& f, std::ostream& out) {
  std::string csv = "r,size,trials,used,p5,p50,p95,p50_abs,seconds_per_estimate,projection_bytes\n";
  for (std::size_t r : f.r) {
    for (std::size_t size : f.sizes) {
      const std::uint64_t key = derive_seed(derive_seed(f.seed, r), size);
      Tensor rows = sample_normal(f.trials, size, key);
      const auto start = std::chrono::steady_clock::now();
      std::vector<double> errs = relative_errors(rows, r, derive_seed(key, 1));
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::vector<double> abs_errs(errs.size());
      std::transform(errs.begin(), errs.end(), abs_errs.begin(), [](double e) { return std::abs(e); });
      const double per = f.trials ? seconds / static_cast<double>(f.trials) : 0.0;
      csv += std::to_string(r) + "," + std::to_string(size) + "," + std::to_string(f.trials) + "," +
             std::to_string(errs.size()) + "," + fmt("%.9g", quantile(errs, 0.05)) + "," +
             fmt("%.9g", quantile(errs, 0.5)) + "," + fmt("%.9g", quantile(errs, 0.95)) + "," +
             fmt("%.9g", quantile(abs_errs, 0.5)) + "," + fmt("%.9g", per) + "," + std::to_string(size * r * 8) + "\n";
      out << "r=" << r << " size=" << size << " p50_abs=" << fmt("%.4f", quantile(abs_errs, 0.5))
          << " seconds_per_estimate=" << fmt("%.3g", per) << "\n";
    }
  }
  std::ofstream file(f.out, std::ios::trunc);
  if (!file) throw io::IoError("cannot write " + f.out);
  file << csv;
  return 0;
}

}  // namespace

std::optional<CertifyOptions> parse_mode(const std::string& text, std::string* why) {
  auto fail = [&](const std::string& msg) -> std::optional<CertifyOptions> {
    if (why) *why = msg;
    return std::nullopt;
  };
  CertifyOptions o;
  if (text == "exact") return o;
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string body = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto parse_uint = [](const std::string& s, std::size_t& v) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) return false;
    v = std::stoul(s);
    return v > 0;
  };
  if (head == "median") {
    o.mode = BoundMode::median;
    if (!parse_uint(body, o.r)) return fail("median needs a positive projection count, e.g. median:10");
    return o;
  }
  if (head == "highprob") {
    o.mode = BoundMode::high_prob;
    const auto comma = body.find(',');
    if (comma == std::string::npos) return fail("highprob needs DELTA,M, e.g. highprob:0.01,10");
    char* end = nullptr;
    const std::string d = body.substr(0, comma);
    o.delta = std::strtod(d.c_str(), &end);
    if (end == d.c_str() || *end != '\0' || !(o.delta > 0 && o.delta < 1)) {
      return fail("highprob delta must lie in (0, 1)");
    }
    if (!parse_uint(body.substr(comma + 1), o.replicas)) return fail("highprob M must be a positive integer");
    return o;
  }
  return fail("unknown mode '" + text + "' (exact, median:R, highprob:DELTA,M)");
}

DataSplits load_data(const fs::path& path) {
  if (fs::is_directory(path)) {
    auto pair = [&](const std::string& prefix) -> std::optional<Dataset> {
      const fs::path img = path / (prefix + "-images-idx3-ubyte"), lab = path / (prefix + "-labels-idx1-ubyte");
      if (!fs::exists(img) || !fs::exists(lab)) return std::nullopt;
      return io::load_idx(img, lab);
    };
    DataSplits d;
    auto train = pair("train");
    if (!train) throw io::IoError(path.string() + ": no train-images-idx3-ubyte/train-labels-idx1-ubyte pair");
    d.train = std::move(*train);
    d.test = pair("test");
    if (!d.test) d.test = pair("t10k");
    return d;
  }
  if (!fs::exists(path)) throw io::IoError("cannot open " + path.string());
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  const std::string cell = first.substr(0, first.find(','));
  char* end = nullptr;
  std::strtol(cell.c_str(), &end, 10);
  const bool header = !cell.empty() && (end == cell.c_str() || *end != '\0');
  return {io::load_csv(path, header), std::nullopt};
}

std::vector<double> relative_errors(const Tensor& rows, std::size_t r, std::uint64_t seed) {
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  const auto& v = rows.values();
  std::vector<double> errs;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(v.begin() + static_cast<long>(i * d), v.begin() + static_cast<long>((i + 1) * d));
    double truth = 0;
    for (double x : row) truth += std::abs(x);
    if (truth == 0) continue;
    const double est = estimate_l1(Tensor({1, d}, std::move(row)), ProjectionPlan{r, ProjectionNorm::l1_cauchy,
                                                                                  derive_seed(seed, i)})[0];
    errs.push_back((est - truth) / truth);
  }
  return errs;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Provably robust training and certification", "dualnet");
  app.require_subcommand(1);
  std::size_t threads = default_threads();
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  TrainFlags train_flags, cascade_flags;
  auto* train_cmd = app.add_subcommand("train", "Train a robust classifier");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* cascade_cmd = app.add_subcommand("cascade-train", "Train a cascade of robust classifiers");
  add_train_flags(cascade_cmd, cascade_flags);
  cascade_cmd->add_option("--stages", cascade_flags.stages, "Number of stages")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cascade_cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  CertifyFlags cf;
  auto* certify_cmd = app.add_subcommand("certify", "Certify a model on a dataset");
  certify_cmd->add_option("--model", cf.model, "Model file")->required();
  certify_cmd->add_option("--data", cf.data, "IDX directory or CSV file")->required();
  certify_cmd->add_option("--epsilon", cf.epsilon, "Ball radius (default: the model's)")->check(CLI::NonNegativeNumber);
  certify_cmd->add_option("--norm", cf.norm, "Ball norm (default: the model's)")->check(CLI::IsMember({"linf", "l2"}));
  certify_cmd->add_option("--mode", cf.mode, "exact, median:R or highprob:DELTA,M")
      ->check(mode_check)
      ->capture_default_str();
  certify_cmd->add_option("--seed", cf.seed, "Projection seed")->capture_default_str();
  certify_cmd->add_option("--out", cf.out, "Certificate CSV");
  certify_cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  PredictFlags pf;
  auto* predict_cmd = app.add_subcommand("predict", "Certified prediction for input rows");
  auto* model_opt = predict_cmd->add_option("--model", pf.model, "Model file");
  auto* cascade_opt = predict_cmd->add_option("--cascade", pf.cascade, "Cascade directory");
  model_opt->excludes(cascade_opt);
  predict_cmd->add_option("--input", pf.input, "CSV of feature rows")->required();
  predict_cmd->add_option("--epsilon", pf.epsilon, "Ball radius (default: the model's)")->check(CLI::NonNegativeNumber);
  predict_cmd->add_option("--norm", pf.norm, "Ball norm (default: the model's)")->check(CLI::IsMember({"linf", "l2"}));
  predict_cmd->add_option("--mode", pf.mode, "exact, median:R or highprob:DELTA,M")
      ->check(mode_check)
      ->capture_default_str();
  predict_cmd->add_option("--seed", pf.seed, "Projection seed")->capture_default_str();

  BenchFlags bf;
  auto* bench_cmd = app.add_subcommand("estimate-bench", "Median estimator error and timing");
  bench_cmd->add_option("--r", bf.r, "Projection counts")->delimiter(',')->check(CLI::PositiveNumber);
  bench_cmd->add_option("--trials", bf.trials, "Vectors per cell")->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--sizes", bf.sizes, "Vector lengths")->delimiter(',')->check(CLI::PositiveNumber);
  bench_cmd->add_option("--seed", bf.seed, "Seed")->capture_default_str();
  bench_cmd->add_option("--out", bf.out, "Output CSV")->required();

  ConvertFlags vf;
  auto* convert_cmd = app.add_subcommand("convert-epsilon", "Volume-matched l2 radius for an linf radius");
  convert_cmd->add_option("--dim", vf.dim, "Input dimension")->required()->check(CLI::Range(1.0, 1e12));
  convert_cmd->add_option("--epsilon-inf", vf.epsilon_inf, "linf radius")->required()->check(CLI::NonNegativeNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (predict_cmd->parsed() && pf.model.empty() && pf.cascade.empty()) {
      throw FlagError("predict needs --model or --cascade");
    }
    auto highprob_l2 = [](const std::string& mode, const std::optional<std::string>& norm) {
      return mode.rfind("highprob", 0) == 0 && norm == "l2";
    };
    if ((certify_cmd->parsed() && highprob_l2(cf.mode, cf.norm)) ||
        (predict_cmd->parsed() && highprob_l2(pf.mode, pf.norm))) {
      throw FlagError("--mode highprob needs --norm linf");
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const FlagError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags, threads, out, err);
    if (cascade_cmd->parsed()) return cmd_cascade_train(cascade_flags, threads, out);
    if (certify_cmd->parsed()) return cmd_certify(cf, threads, out);
    if (predict_cmd->parsed()) return cmd_predict(pf, out);
    if (bench_cmd->parsed()) return cmd_estimate_bench(bf, out);
    if (convert_cmd->parsed()) {
      out << fmt("%.9g", epsilon_l2_equivalent(vf.dim, vf.epsilon_inf)) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dualnet::cli
