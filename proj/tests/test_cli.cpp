#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "panp/checkpoint.hpp"
#include "panp/model.hpp"
#include "panp/pgm.hpp"
#include "panp/taskgen.hpp"
#include "panp/tensor.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace panp;

namespace {

const std::string kCli = PANP_CLI_PATH;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing file: " << path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      out.push_back(text.substr(pos));
      break;
    }
    out.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return out;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

struct Scratch {
  fs::path dir;

  explicit Scratch(const std::string& name) : dir(fs::path("cli_scratch") / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }

  std::string path(const std::string& rel) const { return (dir / rel).string(); }

  int run(const std::string& args, const std::string& tag,
          const std::string& env = "PANP_LOG=quiet") const {
    std::string cmd = env + " " + kCli + " " + args + " >" + path(tag + ".out") + " 2>" +
                      path(tag + ".err");
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
  }

  std::string out(const std::string& tag) const { return slurp(path(tag + ".out")); }
  std::string err(const std::string& tag) const { return slurp(path(tag + ".err")); }
};

// Small patch model so each training run takes milliseconds.
void write_small_config(const std::string& path, size_t steps) {
  json doc;
  doc["model.variant"] = "panp";
  doc["model.d_model"] = 16;
  doc["model.n_heads"] = 2;
  doc["model.depth"] = 1;
  doc["model.latent_dim"] = 8;
  doc["model.enc_hidden"] = 16;
  doc["model.dec_hidden"] = json::array({16});
  doc["model.patch_size"] = 2;
  doc["task.side"] = 8;
  doc["train.steps"] = steps;
  doc["train.batch_size"] = 4;
  doc["train.log_interval"] = 2;
  std::ofstream out(path, std::ios::trunc);
  REQUIRE(out.good());
  out << doc.dump(2) << "\n";
}

}  // namespace

TEST_CASE("train writes an echoed config, metrics rows, and a loadable checkpoint") {
  Scratch s("train_smoke");
  write_small_config(s.path("cfg.json"), 4);
  int code =
      s.run("train --config " + s.path("cfg.json") + " --seed 3 --out " + s.path("run"), "train");
  REQUIRE(code == 0);

  json echoed = json::parse(slurp(s.path("run/config.json")));
  CHECK(echoed.at("seed") == 3);
  CHECK(echoed.at("train.steps") == 4);
  CHECK(echoed.at("model.variant") == "panp");
  CHECK(echoed.at("paths.out") == s.path("run"));
  CHECK(echoed.at("paths.checkpoint") == "");
  CHECK(echoed.at("paths.metrics") == "");

  std::vector<std::string> rows = lines(slurp(s.path("run/metrics.csv")));
  REQUIRE(rows.size() == 4);  // header + steps 1, 3, 4
  CHECK(rows[0] == "step,loss,nll,kl");
  CHECK(rows[1].rfind("1,", 0) == 0);
  CHECK(rows[2].rfind("3,", 0) == 0);
  CHECK(rows[3].rfind("4,", 0) == 0);

  Checkpoint ckpt = load_checkpoint(s.path("run/checkpoint.bin"));
  CHECK(ckpt.step == 4);
  CHECK(ckpt.seed == 3);
  CHECK(ckpt.model.variant == Variant::PANP);
  CHECK(ckpt.model.d_model == 16);
  CHECK(ckpt.model.patch_size == 2);
}

TEST_CASE("usage errors exit 2 and identify the problem") {
  Scratch s("usage");

  CHECK(s.run("train --bogus 1", "bogus") == 2);
  CHECK(s.err("bogus").rfind("error:", 0) == 0);
  CHECK(contains(s.err("bogus"), "--bogus"));

  CHECK(s.run("", "nosub") == 2);
  CHECK(s.err("nosub").rfind("error:", 0) == 0);

  CHECK(s.run("--help", "help") == 0);
  CHECK(contains(s.out("help"), "train"));
  CHECK(contains(s.out("help"), "grad-check"));

  std::ofstream(s.path("badkey.json")) << "{\"bogus\": 1}\n";
  CHECK(s.run("train --config " + s.path("badkey.json"), "badkey") == 2);
  CHECK(contains(s.err("badkey"), "unknown config key 'bogus'"));

  std::ofstream(s.path("broken.json")) << "{nope\n";
  CHECK(s.run("train --config " + s.path("broken.json"), "broken") == 2);
  CHECK(contains(s.err("broken"), "not valid JSON"));

  CHECK(s.run("train --config " + s.path("missing.json"), "noconf") == 2);
  CHECK(contains(s.err("noconf"), "cannot open config file"));

  CHECK(s.run("eval --fractions 0.5,,1.0", "badfrac") == 2);
  CHECK(contains(s.err("badfrac"), "empty entry"));
}

TEST_CASE("identical seeds reproduce byte-identical outputs and echoed configs rerun") {
  Scratch s("determinism");
  write_small_config(s.path("cfg.json"), 6);
  std::string base = "train --config " + s.path("cfg.json") + " --seed 11 --out ";
  REQUIRE(s.run(base + s.path("a"), "a") == 0);
  REQUIRE(s.run(base + s.path("b"), "b") == 0);
  CHECK(slurp(s.path("a/metrics.csv")) == slurp(s.path("b/metrics.csv")));
  CHECK(slurp(s.path("a/checkpoint.bin")) == slurp(s.path("b/checkpoint.bin")));

  // The echoed config carries the seed, and --out redirects the rerun.
  REQUIRE(s.run("train --config " + s.path("a/config.json") + " --out " + s.path("c"), "c") == 0);
  CHECK(slurp(s.path("c/metrics.csv")) == slurp(s.path("a/metrics.csv")));
  CHECK(slurp(s.path("c/checkpoint.bin")) == slurp(s.path("a/checkpoint.bin")));
}

TEST_CASE("eval writes a csv row per fraction and rejects corrupt checkpoints") {
  Scratch s("eval");
  write_small_config(s.path("cfg.json"), 3);
  REQUIRE(s.run("train --config " + s.path("cfg.json") + " --seed 7 --out " + s.path("run"),
                "train") == 0);

  std::string args = "eval --config " + s.path("cfg.json") + " --seed 9 --checkpoint " +
                     s.path("run/checkpoint.bin") + " --n-tasks 5 --fractions 0.25,0.5,1.0";
  REQUIRE(s.run(args + " --out " + s.path("e1"), "e1") == 0);

  std::vector<std::string> table = lines(s.out("e1"));
  REQUIRE(table.size() == 4);
  CHECK(contains(table[0], "fraction"));
  CHECK(contains(table[0], "nll"));

  std::vector<std::string> rows = lines(slurp(s.path("e1/eval.csv")));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "fraction,nll,mse");
  const double want[] = {0.25, 0.5, 1.0};
  for (size_t i = 0; i < 3; ++i) {
    double f = 0.0, nll = 0.0, mse = 0.0;
    REQUIRE(std::sscanf(rows[i + 1].c_str(), "%lf,%lf,%lf", &f, &nll, &mse) == 3);
    CHECK(f == want[i]);
    CHECK(mse >= 0.0);
  }

  REQUIRE(s.run(args + " --out " + s.path("e2"), "e2") == 0);
  CHECK(slurp(s.path("e2/eval.csv")) == slurp(s.path("e1/eval.csv")));

  // Flip a payload byte that parses cleanly so the CRC is what rejects it.
  std::string bytes = slurp(s.path("run/checkpoint.bin"));
  bytes[bytes.size() - 5] ^= 0x40;
  std::ofstream(s.path("bad.bin"), std::ios::binary) << bytes;
  CHECK(s.run("eval --config " + s.path("cfg.json") + " --checkpoint " + s.path("bad.bin") +
                  " --out " + s.path("e3"),
              "corrupt") == 4);
  CHECK(contains(s.err("corrupt"), "checksum mismatch"));

  CHECK(s.run("eval --checkpoint " + s.path("nope.bin") + " --out " + s.path("e4"), "missing") ==
        4);
  CHECK(s.err("missing").rfind("error:", 0) == 0);
}

TEST_CASE("reconstruct writes original, mask, and reconstruction images") {
  Scratch s("reconstruct");
  write_small_config(s.path("cfg.json"), 3);
  REQUIRE(s.run("train --config " + s.path("cfg.json") + " --seed 5 --out " + s.path("run"),
                "train") == 0);

  std::string base = "reconstruct --config " + s.path("cfg.json") + " --checkpoint " +
                     s.path("run/checkpoint.bin");
  REQUIRE(s.run(base + " --synthetic --ctx-fraction 0.3 --seed 2 --out " + s.path("rec"),
                "rec") == 0);

  std::string out = s.out("rec");
  REQUIRE(out.rfind("target mse: ", 0) == 0);
  double mse = -1.0;
  REQUIRE(std::sscanf(out.c_str(), "target mse: %lf", &mse) == 1);
  CHECK(mse >= 0.0);

  Tensor orig = read_pgm(s.path("rec/original.pgm"));
  CHECK(orig.rows() == 8);
  Tensor recon = read_pgm(s.path("rec/reconstruction.pgm"));
  CHECK(recon.rows() == 8);

  // Non-context patches are filled with mid-gray; ceil(0.3 * 16) = 5 stay visible.
  Tensor mask = read_pgm(s.path("rec/mask.pgm"));
  auto [rows, coords] = patchify(mask, 2);
  size_t visible = 0;
  for (size_t r = 0; r < rows.rows(); ++r) {
    bool gray = true;
    for (size_t c = 0; c < rows.cols(); ++c) {
      gray = gray && rows.at(r, c) == 128.0 / 255.0;
    }
    if (!gray) ++visible;
  }
  CHECK(visible == 5);

  REQUIRE(s.run(base + " --synthetic --ctx-fraction 0.3 --seed 2 --out " + s.path("rec_b"),
                "rec_b") == 0);
  CHECK(slurp(s.path("rec_b/reconstruction.pgm")) == slurp(s.path("rec/reconstruction.pgm")));
  CHECK(s.out("rec_b") == out);

  REQUIRE(s.run("gen-data --n 1 --side 9 --seed 1 --out " + s.path("odd"), "gen") == 0);
  CHECK(s.run(base + " --input " + s.path("odd/img_0000.pgm") + " --out " + s.path("rec2"),
              "odd") == 2);
  CHECK(contains(s.err("odd"), "does not divide"));

  CHECK(s.run(base + " --input " + s.path("odd/img_0000.pgm") + " --synthetic --out " +
                  s.path("rec3"),
              "both") == 2);
  CHECK(contains(s.err("both"), "exactly one"));
}

TEST_CASE("gen-data writes deterministic images with a broad gray range") {
  Scratch s("gendata");
  REQUIRE(s.run("gen-data --n 5 --side 16 --seed 4 --out " + s.path("g1"), "g1") == 0);
  for (int i = 0; i < 5; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "img_%04d.pgm", i);
    CHECK(fs::exists(s.path("g1/" + std::string(name))));
  }
  CHECK(!fs::exists(s.path("g1/img_0005.pgm")));

  REQUIRE(s.run("gen-data --n 5 --side 16 --seed 4 --out " + s.path("g2"), "g2") == 0);
  for (int i = 0; i < 5; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "img_%04d.pgm", i);
    CHECK(slurp(s.path("g1/" + std::string(name))) == slurp(s.path("g2/" + std::string(name))));
  }

  REQUIRE(s.run("gen-data --n 1 --side 16 --seed 5 --out " + s.path("g3"), "g3") == 0);
  CHECK(slurp(s.path("g3/img_0000.pgm")) != slurp(s.path("g1/img_0000.pgm")));

  Tensor img = read_pgm(s.path("g1/img_0000.pgm"));
  std::set<double> levels(img.data().begin(), img.data().end());
  CHECK(levels.size() > 50);
}

TEST_CASE("grad-check passes and reports each check") {
  Scratch s("gradcheck");
  REQUIRE(s.run("grad-check", "gc") == 0);
  std::string out = s.out("gc");
  CHECK(!contains(out, "FAIL"));
  CHECK(contains(out, "multi_head_attention"));
  CHECK(contains(out, "patch_model_elbo"));
  std::vector<std::string> report = lines(out);
  CHECK(report.size() >= 10);
  for (const std::string& line : report) {
    CHECK(contains(line, "rel_err"));
    CHECK(contains(line, "ok"));
  }
}

TEST_CASE("PANP_LOG controls progress logging but never errors") {
  Scratch s("logging");
  write_small_config(s.path("cfg.json"), 2);

  REQUIRE(s.run("train --config " + s.path("cfg.json") + " --out " + s.path("q"), "quiet",
                "PANP_LOG=quiet") == 0);
  CHECK(s.err("quiet").empty());

  REQUIRE(s.run("train --config " + s.path("cfg.json") + " --out " + s.path("v"), "info",
                "PANP_LOG=info") == 0);
  CHECK(s.out("info").empty());
  CHECK(contains(s.err("info"), "step 1 "));
  CHECK(contains(s.err("info"), "wrote "));

  REQUIRE(s.run("train --config " + s.path("cfg.json") + " --out " + s.path("d"), "debug",
                "PANP_LOG=debug") == 0);
  CHECK(contains(s.err("debug"), "effective config"));

  CHECK(s.run("eval --checkpoint " + s.path("missing.bin") + " --out " + s.path("e"), "err_quiet",
              "PANP_LOG=quiet") == 4);
  CHECK(s.err("err_quiet").rfind("error:", 0) == 0);
}
