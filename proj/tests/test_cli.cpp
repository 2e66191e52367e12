// Runs the command-line binary and checks exit codes and outputs.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir;
  Scratch() {
    dir = fs::temp_directory_path() / ("fewshot-cli-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
  std::string file(const std::string& name) const { return (dir / name).string(); }
};

int run(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd = std::string("'") + FEWSHOT_CLI_PATH + "' " + args + " > '" + log + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSmoke =
    "data.classes = 2\ndata.per_class = 4\ndata.size = 16\nsplit.train = 3\nsplit.test = 1\n"
    "model.channels = 4,8\nmodel.blocks = 1\nmodel.embedding = 8\nmodel.proj_dim = 8\n"
    "pretrain.epochs = 2\npretrain.batch_size = 4\npretrain.pool = all\n"
    "finetune.epochs = 2\nfinetune.batch_size = 2\nfinetune.val_fraction = 0.3\n";

}  // namespace

TEST_CASE("usage and version") {
  CHECK(run("--version") == 0);
  CHECK(run("--help") == 0);
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("finetune --init a.ckpt --scratch") == 2);
  CHECK(run("eval") == 2);
  CHECK(run("defaults") == 0);
}

TEST_CASE("gen-data exit codes and determinism") {
  Scratch s;
  const auto log = s.file("log.txt");
  CHECK(run("gen-data --classes 5 --per-class 150 --size 32 --seed 7 --out " + s.file("a.ssld"), log) == 0);
  CHECK(slurp(log).find("750 images") != std::string::npos);
  CHECK(run("gen-data --classes 5 --per-class 150 --size 32 --seed 7 --quiet --out " + s.file("b.ssld")) == 0);
  CHECK(slurp(s.file("a.ssld")) == slurp(s.file("b.ssld")));
  CHECK(run("gen-data --classes 1 --out " + s.file("c.ssld"), log) == 2);
  CHECK_FALSE(slurp(log).empty());
  std::ofstream(s.file("blocker")) << "x";
  CHECK(run("gen-data --out " + s.file("blocker") + "/d.ssld") == 3);
}

TEST_CASE("pipeline exit codes") {
  Scratch s;
  std::ofstream(s.file("run.cfg")) << kSmoke;
  std::ofstream(s.file("other.cfg")) << std::string(kSmoke) << "model.embedding = 12\n";
  std::ofstream(s.file("narrow.cfg")) << "data.classes = 2\ndata.per_class = 4\ndata.size = 16\nsplit.train = 3\n"
                                         "split.test = 1\nmodel.channels = 4,6\nmodel.blocks = 1\n";
  const auto out = s.file("out");
  const auto cfg = " --config " + s.file("run.cfg") + " --out " + out + " --quiet";

  CHECK(run("pretrain --config " + s.file("missing.cfg")) == 3);
  CHECK(run("pretrain --config " + s.file("other.cfg")) == 2);
  REQUIRE(run("pretrain" + cfg) == 0);
  CHECK(fs::exists(out + "/pretrained.ckpt"));
  CHECK(fs::exists(out + "/pretrain.csv"));

  CHECK(run("finetune --config " + s.file("narrow.cfg") + " --out " + out + "/n --init " + out +
            "/pretrained.ckpt") == 5);
  CHECK(run("finetune" + cfg + " --init " + s.file("absent.ckpt")) == 3);
  REQUIRE(run("finetune" + cfg + " --init " + out + "/pretrained.ckpt") == 0);

  const auto log1 = s.file("eval1.txt"), log2 = s.file("eval2.txt");
  REQUIRE(run("eval" + cfg + " --checkpoint " + out + "/finetuned.ckpt", log1) == 0);
  REQUIRE(run("eval" + cfg + " --checkpoint " + out + "/finetuned.ckpt", log2) == 0);
  CHECK(slurp(log1) == slurp(log2));
  CHECK(slurp(log1).find("accuracy ") != std::string::npos);
  CHECK(fs::exists(out + "/confusion_test.csv"));

  REQUIRE(run("gen-data --classes 3 --per-class 4 --size 16 --quiet --out " + s.file("three.ssld")) == 0);
  CHECK(run("eval" + cfg + " --checkpoint " + out + "/finetuned.ckpt --data " + s.file("three.ssld")) == 5);
  CHECK(run("eval" + cfg + " --checkpoint " + out + "/pretrained.ckpt") == 5);

  std::ofstream(s.file("nan.cfg")) << std::string(kSmoke) << "pretrain.lr = 1e30\n";
  CHECK(run("pretrain --config " + s.file("nan.cfg") + " --out " + s.file("nan") + " --quiet") == 4);
}
