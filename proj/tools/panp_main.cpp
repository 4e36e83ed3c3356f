#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "panp/checkpoint.hpp"
#include "panp/checks.hpp"
#include "panp/model.hpp"
#include "panp/pgm.hpp"
#include "panp/rng.hpp"
#include "panp/taskgen.hpp"
#include "panp/tensor.hpp"
#include "panp/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace panp;

namespace {

enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("PANP_LOG");
  if (!env) return LogLevel::Info;
  std::string v(env);
  if (v == "quiet") return LogLevel::Quiet;
  if (v == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::Info) std::cerr << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::Debug) std::cerr << msg << "\n";
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  KernelConfig kernel;

  size_t side = 16;  // image tasks
  size_t n_tgt = 50;  // point tasks
  size_t n_ctx_lo = 3;
  size_t n_ctx_hi = 10;
  double x_lo = -2.0;
  double x_hi = 2.0;

  size_t eval_n_tasks = 100;
  std::vector<double> fractions = {0.1, 0.5, 1.0};

  uint64_t seed = 0;
  std::string out = "out";
  std::string checkpoint;  // default <out>/checkpoint.bin
  std::string metrics;     // default <out>/metrics.csv

  std::string checkpoint_path() const {
    return checkpoint.empty() ? out + "/checkpoint.bin" : checkpoint;
  }
  std::string metrics_path() const { return metrics.empty() ? out + "/metrics.csv" : metrics; }
};

template <typename T>
T as_unsigned(const json& v, const std::string& key) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0)) {
    throw std::invalid_argument("config key '" + key + "' must be a nonnegative integer");
  }
  return static_cast<T>(v.get<uint64_t>());
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) {
    throw std::invalid_argument("config key '" + key + "' must be a number");
  }
  return v.get<double>();
}

void apply_config_entry(RunConfig& cfg, const std::string& key, const json& v) {
  if (key == "model.variant") {
    if (!v.is_string()) throw std::invalid_argument("config key 'model.variant' must be a string");
    cfg.model.variant = variant_from_name(v.get<std::string>());
  } else if (key == "model.d_model") {
    cfg.model.d_model = as_unsigned<size_t>(v, key);
  } else if (key == "model.n_heads") {
    cfg.model.n_heads = as_unsigned<size_t>(v, key);
  } else if (key == "model.depth") {
    cfg.model.depth = as_unsigned<size_t>(v, key);
  } else if (key == "model.latent_dim") {
    cfg.model.latent_dim = as_unsigned<size_t>(v, key);
  } else if (key == "model.enc_hidden") {
    cfg.model.enc_hidden = as_unsigned<size_t>(v, key);
  } else if (key == "model.dec_hidden") {
    if (!v.is_array()) throw std::invalid_argument("config key 'model.dec_hidden' must be an array");
    cfg.model.dec_hidden.clear();
    for (const auto& h : v) cfg.model.dec_hidden.push_back(as_unsigned<size_t>(h, key));
  } else if (key == "model.patch_size") {
    cfg.model.patch_size = as_unsigned<size_t>(v, key);
  } else if (key == "model.sigma_floor") {
    cfg.model.sigma_floor = as_double(v, key);
  } else if (key == "model.sigma_scale") {
    cfg.model.sigma_scale = as_double(v, key);
  } else if (key == "train.steps") {
    cfg.train.steps = as_unsigned<size_t>(v, key);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = as_unsigned<size_t>(v, key);
  } else if (key == "train.lr") {
    cfg.train.lr = as_double(v, key);
  } else if (key == "train.beta1") {
    cfg.train.beta1 = as_double(v, key);
  } else if (key == "train.beta2") {
    cfg.train.beta2 = as_double(v, key);
  } else if (key == "train.eps") {
    cfg.train.eps = as_double(v, key);
  } else if (key == "train.log_interval") {
    cfg.train.log_interval = as_unsigned<size_t>(v, key);
  } else if (key == "train.kl_weight") {
    cfg.train.kl_weight = as_double(v, key);
  } else if (key == "kernel.lengthscale") {
    cfg.kernel.lengthscale = as_double(v, key);
  } else if (key == "kernel.signal_var") {
    cfg.kernel.signal_var = as_double(v, key);
  } else if (key == "kernel.noise_std") {
    cfg.kernel.noise_std = as_double(v, key);
  } else if (key == "kernel.jitter") {
    cfg.kernel.jitter = as_double(v, key);
  } else if (key == "task.side") {
    cfg.side = as_unsigned<size_t>(v, key);
  } else if (key == "task.n_tgt") {
    cfg.n_tgt = as_unsigned<size_t>(v, key);
  } else if (key == "task.n_ctx_lo") {
    cfg.n_ctx_lo = as_unsigned<size_t>(v, key);
  } else if (key == "task.n_ctx_hi") {
    cfg.n_ctx_hi = as_unsigned<size_t>(v, key);
  } else if (key == "task.x_lo") {
    cfg.x_lo = as_double(v, key);
  } else if (key == "task.x_hi") {
    cfg.x_hi = as_double(v, key);
  } else if (key == "eval.n_tasks") {
    cfg.eval_n_tasks = as_unsigned<size_t>(v, key);
  } else if (key == "eval.fractions") {
    if (!v.is_array()) throw std::invalid_argument("config key 'eval.fractions' must be an array");
    cfg.fractions.clear();
    for (const auto& f : v) cfg.fractions.push_back(as_double(f, key));
  } else if (key == "seed") {
    cfg.seed = as_unsigned<uint64_t>(v, key);
  } else if (key == "paths.out") {
    if (!v.is_string()) throw std::invalid_argument("config key 'paths.out' must be a string");
    cfg.out = v.get<std::string>();
  } else if (key == "paths.checkpoint") {
    if (!v.is_string()) throw std::invalid_argument("config key 'paths.checkpoint' must be a string");
    cfg.checkpoint = v.get<std::string>();
  } else if (key == "paths.metrics") {
    if (!v.is_string()) throw std::invalid_argument("config key 'paths.metrics' must be a string");
    cfg.metrics = v.get<std::string>();
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) {
    throw std::invalid_argument("config file '" + path + "' must hold a JSON object");
  }
  for (const auto& [key, value] : doc.items()) apply_config_entry(cfg, key, value);
}

json config_to_json(const RunConfig& cfg) {
  json doc;
  doc["model.variant"] = variant_name(cfg.model.variant);
  doc["model.d_model"] = cfg.model.d_model;
  doc["model.n_heads"] = cfg.model.n_heads;
  doc["model.depth"] = cfg.model.depth;
  doc["model.latent_dim"] = cfg.model.latent_dim;
  doc["model.enc_hidden"] = cfg.model.enc_hidden;
  doc["model.dec_hidden"] = cfg.model.dec_hidden;
  doc["model.patch_size"] = cfg.model.patch_size;
  doc["model.sigma_floor"] = cfg.model.sigma_floor;
  doc["model.sigma_scale"] = cfg.model.sigma_scale;
  doc["train.steps"] = cfg.train.steps;
  doc["train.batch_size"] = cfg.train.batch_size;
  doc["train.lr"] = cfg.train.lr;
  doc["train.beta1"] = cfg.train.beta1;
  doc["train.beta2"] = cfg.train.beta2;
  doc["train.eps"] = cfg.train.eps;
  doc["train.log_interval"] = cfg.train.log_interval;
  doc["train.kl_weight"] = cfg.train.kl_weight;
  doc["kernel.lengthscale"] = cfg.kernel.lengthscale;
  doc["kernel.signal_var"] = cfg.kernel.signal_var;
  doc["kernel.noise_std"] = cfg.kernel.noise_std;
  doc["kernel.jitter"] = cfg.kernel.jitter;
  doc["task.side"] = cfg.side;
  doc["task.n_tgt"] = cfg.n_tgt;
  doc["task.n_ctx_lo"] = cfg.n_ctx_lo;
  doc["task.n_ctx_hi"] = cfg.n_ctx_hi;
  doc["task.x_lo"] = cfg.x_lo;
  doc["task.x_hi"] = cfg.x_hi;
  doc["eval.n_tasks"] = cfg.eval_n_tasks;
  doc["eval.fractions"] = cfg.fractions;
  doc["seed"] = cfg.seed;
  doc["paths.out"] = cfg.out;
  // Raw values: empty means "derive from paths.out", and echoing them raw
  // keeps --out able to redirect a rerun of the echoed config.
  doc["paths.checkpoint"] = cfg.checkpoint;
  doc["paths.metrics"] = cfg.metrics;
  return doc;
}

void echo_config(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  std::ofstream out(cfg.out + "/config.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + cfg.out + "/config.json'");
  out << config_to_json(cfg).dump(2) << "\n";
}

std::vector<double> parse_fractions(const std::string& csv) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t comma = csv.find(',', pos);
    std::string tok = csv.substr(pos, comma == std::string::npos ? csv.size() - pos : comma - pos);
    if (tok.empty()) throw std::invalid_argument("empty entry in fractions list '" + csv + "'");
    size_t used = 0;
    double f = 0.0;
    try {
      f = std::stod(tok, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad fraction '" + tok + "'");
    }
    if (used != tok.size()) throw std::invalid_argument("bad fraction '" + tok + "'");
    out.push_back(f);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

TaskSource make_task_source(const RunConfig& cfg) {
  if (cfg.model.uses_patches()) {
    if (cfg.side == 0 || cfg.side % cfg.model.patch_size != 0) {
      throw std::invalid_argument("patch size must divide the image side");
    }
    auto sampler = std::make_shared<ImageGpSampler>(cfg.side, cfg.kernel);
    size_t side = cfg.side;
    size_t patch = cfg.model.patch_size;
    return [sampler, side, patch](Rng& rng) {
      Tensor img = sampler->sample(rng);
      auto [rows, coords] = patchify(img, patch);
      double f = rng.uniform(0.1, 0.5);
      return split_context_target_patches(rows, coords, side, patch, rng, f);
    };
  }
  KernelConfig kernel = cfg.kernel;
  size_t lo = cfg.n_ctx_lo, hi = cfg.n_ctx_hi, n_tgt = cfg.n_tgt;
  double x_lo = cfg.x_lo, x_hi = cfg.x_hi;
  return [kernel, lo, hi, n_tgt, x_lo, x_hi](Rng& rng) {
    return make_1d_task(rng, lo, hi, n_tgt, x_lo, x_hi, kernel);
  };
}

int cmd_train(const RunConfig& cfg) {
  echo_config(cfg);
  log_debug("effective config:\n" + config_to_json(cfg).dump(2));

  TaskSource source = make_task_source(cfg);

  std::ofstream csv(cfg.metrics_path(), std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write metrics file '" + cfg.metrics_path() + "'");
  csv << "step,loss,nll,kl\n";
  MetricsSink sink = [&csv](const MetricsRow& row) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", row.step, row.loss, row.nll,
                  row.kl);
    csv << buf;
    log_info(std::string("step ") + std::to_string(row.step) + " loss " +
             std::to_string(row.loss) + " nll " + std::to_string(row.nll) + " kl " +
             std::to_string(row.kl));
  };

  TrainResult res = train(cfg.model, cfg.train, source, sink);
  csv.close();
  if (!csv) throw std::runtime_error("failed to write metrics file '" + cfg.metrics_path() + "'");

  save_checkpoint(cfg.checkpoint_path(), res.checkpoint);
  log_info("wrote " + cfg.checkpoint_path() + " and " + cfg.metrics_path());
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path());
  ModelParams params = params_from_checkpoint(ckpt);

  EvalConfig ecfg;
  ecfg.n_tasks = cfg.eval_n_tasks;
  ecfg.fractions = cfg.fractions;
  ecfg.seed = cfg.seed;
  ecfg.kernel = cfg.kernel;
  ecfg.side = cfg.side;
  ecfg.n_tgt = cfg.n_tgt;
  ecfg.x_lo = cfg.x_lo;
  ecfg.x_hi = cfg.x_hi;

  EvalReport report = evaluate(params, ecfg);

  echo_config(cfg);
  std::printf("%10s %12s %12s %12s\n", "fraction", "nll", "mse", "ctx_mse");
  for (const EvalRow& row : report.rows) {
    std::printf("%10.3f %12.6f %12.6f %12.6f\n", row.fraction, row.nll, row.mse, row.ctx_mse);
  }

  std::string csv_path = cfg.out + "/eval.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write '" + csv_path + "'");
  csv << "fraction,nll,mse\n";
  for (const EvalRow& row : report.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", row.fraction, row.nll, row.mse);
    csv << buf;
  }
  csv.close();
  if (!csv) throw std::runtime_error("failed to write '" + csv_path + "'");
  log_info("wrote " + csv_path);
  return 0;
}

int cmd_reconstruct(const RunConfig& cfg, const std::string& input, bool synthetic,
                    double ctx_fraction) {
  if (synthetic == !input.empty()) {
    throw std::invalid_argument("pass exactly one of --input PATH or --synthetic");
  }
  if (!(ctx_fraction > 0.0 && ctx_fraction <= 1.0)) {
    throw std::invalid_argument("ctx-fraction must lie in (0, 1]");
  }
  Checkpoint ckpt = load_checkpoint(cfg.checkpoint_path());
  ModelParams params = params_from_checkpoint(ckpt);
  if (!params.cfg.uses_patches()) {
    throw std::invalid_argument("checkpoint does not hold a patch model");
  }

  Rng rng(cfg.seed);
  Tensor img;
  if (synthetic) {
    img = make_image_task(rng, cfg.side, cfg.kernel);
  } else {
    img = read_pgm(input);
  }
  size_t side = img.rows();
  size_t patch = params.cfg.patch_size;
  if (side % patch != 0) {
    throw std::invalid_argument("patch size " + std::to_string(patch) +
                                " does not divide image side " + std::to_string(side));
  }

  auto [rows, coords] = patchify(img, patch);
  size_t n_patches = rows.rows();
  size_t n_ctx = static_cast<size_t>(std::ceil(ctx_fraction * static_cast<double>(n_patches)));
  n_ctx = std::min(std::max<size_t>(n_ctx, 1), n_patches);
  std::vector<size_t> perm = rng.permutation(n_patches);
  std::vector<size_t> sel(perm.begin(), perm.begin() + n_ctx);
  TaskBatch task = make_patch_task_from_selection(rows, coords, side, patch, sel);

  NoGradGuard ng;
  ForwardResult res = forward(params, task, rng, Mode::Eval);
  Tensor recon = unpatchify(res.pred.mu, task.tgt_coords, patch, side);

  double mse = 0.0;
  for (size_t i = 0; i < img.numel(); ++i) {
    double d = recon.data()[i] - img.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(img.numel());

  std::vector<char> is_ctx(n_patches, 0);
  for (size_t i : sel) is_ctx[i] = 1;
  std::vector<double> mask_rows_data = rows.data();
  size_t row_width = patch * patch;
  for (size_t r = 0; r < n_patches; ++r) {
    if (is_ctx[r]) continue;
    for (size_t c = 0; c < row_width; ++c) mask_rows_data[r * row_width + c] = 128.0 / 255.0;
  }
  Tensor mask = unpatchify(Tensor({n_patches, row_width}, mask_rows_data), coords, patch, side);

  echo_config(cfg);
  write_pgm(cfg.out + "/original.pgm", img);
  write_pgm(cfg.out + "/mask.pgm", mask);
  write_pgm(cfg.out + "/reconstruction.pgm", recon);

  std::printf("target mse: %.17g\n", mse);
  log_info("wrote " + cfg.out + "/{original,mask,reconstruction}.pgm");
  return 0;
}

int cmd_gen_data(const RunConfig& cfg, size_t n_images) {
  if (n_images < 1) throw std::invalid_argument("need at least one image");
  echo_config(cfg);
  ImageGpSampler sampler(cfg.side, cfg.kernel);
  for (size_t i = 0; i < n_images; ++i) {
    Rng rng(cfg.seed + 1 + i);
    Tensor img = sampler.sample(rng);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.pgm", i);
    write_pgm(cfg.out + "/" + name, img);
  }
  log_info("wrote " + std::to_string(n_images) + " images to " + cfg.out);
  return 0;
}

int cmd_grad_check() {
  std::vector<CheckResult> results = run_grad_checks();
  bool all_pass = true;
  for (const CheckResult& r : results) {
    std::printf("%-22s rel_err %.3e  %s\n", r.name.c_str(), r.err, r.pass ? "ok" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) {
    std::cerr << "error: gradient checks failed\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning regression on GP tasks: patch-attentive and baseline neural processes"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, fractions_csv, input_path;
  uint64_t seed = 0;
  size_t steps = 0, n_tasks = 0, n_images = 16, side = 0;
  double ctx_fraction = 0.3;
  bool synthetic = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file with flat dotted keys");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--checkpoint", checkpoint_path, "checkpoint path");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  add_common(train_cmd);
  train_cmd->add_option("--steps", steps, "training steps");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint over fresh tasks");
  add_common(eval_cmd);
  eval_cmd->add_option("--fractions", fractions_csv, "comma-separated context fractions");
  eval_cmd->add_option("--n-tasks", n_tasks, "number of evaluation tasks");

  CLI::App* rec_cmd = app.add_subcommand("reconstruct", "reconstruct an image from partial context");
  add_common(rec_cmd);
  rec_cmd->add_option("--input", input_path, "input PGM image");
  rec_cmd->add_flag("--synthetic", synthetic, "draw the input from the GP instead");
  rec_cmd->add_option("--ctx-fraction", ctx_fraction, "fraction of patches revealed as context");

  CLI::App* gen_cmd = app.add_subcommand("gen-data", "write GP-sampled PGM images");
  add_common(gen_cmd);
  gen_cmd->add_option("--n", n_images, "number of images");
  gen_cmd->add_option("--side", side, "image side length");

  CLI::App* check_cmd = app.add_subcommand("grad-check", "run the gradient verification suite");
  (void)check_cmd;

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_config_file(cfg, config_path);
    auto flag_set = [](CLI::App* s, const char* name) {
      CLI::Option* opt = s->get_option_no_throw(name);
      return opt != nullptr && opt->count() > 0;
    };

    CLI::App* sub = app.get_subcommands().front();
    if (flag_set(sub, "--seed")) cfg.seed = seed;
    cfg.train.seed = cfg.seed;
    if (flag_set(sub, "--out")) cfg.out = out_dir;
    if (flag_set(sub, "--checkpoint")) cfg.checkpoint = checkpoint_path;

    if (sub == train_cmd) {
      if (flag_set(sub, "--steps")) cfg.train.steps = steps;
      return cmd_train(cfg);
    }
    if (sub == eval_cmd) {
      if (flag_set(sub, "--fractions")) cfg.fractions = parse_fractions(fractions_csv);
      if (flag_set(sub, "--n-tasks")) cfg.eval_n_tasks = n_tasks;
      return cmd_eval(cfg);
    }
    if (sub == rec_cmd) {
      return cmd_reconstruct(cfg, input_path, synthetic, ctx_fraction);
    }
    if (sub == gen_cmd) {
      if (flag_set(sub, "--side")) cfg.side = side;
      return cmd_gen_data(cfg, n_images);
    }
    return cmd_grad_check();
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
