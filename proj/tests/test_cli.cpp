#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "support.hpp"

using namespace xlkd;
using namespace xlkd::test;
using nlohmann::json;

namespace {

const std::string kCli = XLKD_CLI_PATH;

CommandResult cli(const TempDir& dir, std::vector<std::string> args) {
  args.insert(args.begin(), "-q");
  return run_command(kCli, args, dir.path);
}

json error_of(const CommandResult& r) {
  const auto j = json::parse(r.err.substr(r.err.find('{')));
  return j.at("error");
}

// Small corpus shared by most cases.
std::filesystem::path synth(const TempDir& dir, const std::string& name = "corpus") {
  const auto out = dir.path / name;
  const auto r = cli(dir, {"synth", "--out", out.string(), "--pairs", "8", "--tasks", "16", "--seed", "5"});
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  return out;
}

std::vector<std::string> distill_args(const std::filesystem::path& corpus, const std::filesystem::path& out) {
  return {"distill",
          "--parallel",
          (corpus / "parallel.jsonl").string(),
          "--teacher-vocab",
          (corpus / "teacher_vocab.txt").string(),
          "--student-vocab",
          (corpus / "student_vocab.txt").string(),
          "--out",
          out.string(),
          "--set",
          "train.stages.0.max_steps=4",
          "train.batch_size=4"};
}

}  // namespace

TEST_CASE("help exits cleanly and lists the subcommands") {
  TempDir dir;
  const auto r = cli(dir, {"--help"});
  CHECK(r.exit_code == 0);
  for (const char* sub : {"synth", "vocab", "codemix", "distill", "finetune", "aug", "eval", "export-embeddings"}) {
    CHECK_MESSAGE(r.out.find(sub) != std::string::npos, sub);
  }
}

TEST_CASE("usage errors exit 2 with a JSON error on stderr") {
  TempDir dir;
  SUBCASE("unknown flag") {
    const auto r = cli(dir, {"synth", "--bogus"});
    CHECK(r.exit_code == 2);
    CHECK(error_of(r).at("type") == "usage");
  }
  SUBCASE("missing subcommand") {
    const auto r = cli(dir, {});
    CHECK(r.exit_code == 2);
    CHECK(error_of(r).at("type") == "usage");
  }
  SUBCASE("missing required option") {
    const auto r = cli(dir, {"distill", "--parallel", "x.jsonl"});
    CHECK(r.exit_code == 2);
  }
  SUBCASE("malformed --set") {
    const auto r = cli(dir, {"synth", "--out", (dir.path / "s").string(), "--set", "novalue"});
    CHECK(r.exit_code == 2);
    CHECK(error_of(r).at("command") == "synth");
  }
  SUBCASE("unknown preset") {
    const auto r = cli(dir, {"synth", "--out", (dir.path / "s").string(), "--preset", "huge"});
    CHECK(r.exit_code == 2);
  }
}

TEST_CASE("runtime errors exit 1 and name the failure kind") {
  TempDir dir;
  SUBCASE("missing input file") {
    const auto r = cli(dir, {"vocab", "--data", (dir.path / "absent.jsonl").string(), "--out", dir.path.string()});
    CHECK(r.exit_code == 1);
    CHECK(error_of(r).at("type") == "io");
    CHECK(error_of(r).at("command") == "vocab");
  }
  SUBCASE("malformed dataset") {
    write_file(dir.path / "bad.jsonl", "{\"question_id\": 1\n");
    const auto r = cli(dir, {"vocab", "--data", (dir.path / "bad.jsonl").string(), "--out", dir.path.string()});
    CHECK(r.exit_code == 1);
    CHECK(error_of(r).at("type") == "format");
  }
  SUBCASE("bad config value") {
    const auto corpus = synth(dir);
    auto args = distill_args(corpus, dir.path / "d");
    args.push_back("codemix.sampling=sometimes");
    const auto r = cli(dir, args);
    CHECK(r.exit_code == 1);
    CHECK(error_of(r).at("type") == "format");
  }
}

TEST_CASE("synth is reproducible for a fixed seed") {
  TempDir dir;
  const auto a = synth(dir, "a");
  const auto b = synth(dir, "b");
  for (const char* f : {"parallel.jsonl", "task.jsonl", "teacher_vocab.txt", "student_vocab.txt",
                        "answer_translations.tsv"}) {
    CHECK_MESSAGE(read_file(a / f) == read_file(b / f), f);
  }
  CHECK(read_jsonl(a / "parallel.jsonl").size() == 8);
  CHECK(read_jsonl(a / "task.jsonl").size() == 16);
}

TEST_CASE("config echo records overrides and the seed") {
  TempDir dir;
  const auto corpus = synth(dir);
  write_file(dir.path / "cfg.json", R"({"distill": {"layer_weights": {"4": 0.5}}})");
  auto args = distill_args(corpus, dir.path / "d");
  args.insert(args.end(), {"--config", (dir.path / "cfg.json").string(), "--seed", "99"});
  const auto r = cli(dir, args);
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  const auto summary = json::parse(read_file(dir.path / "d" / "summary.json"));
  CHECK(summary.at("config").at("seed") == 99);
  CHECK(summary.at("config").at("distill").at("layer_weights").at("4") == doctest::Approx(0.5));
  CHECK(summary.at("config").at("train").at("batch_size") == 4);
  CHECK(summary.at("steps") == 4);
  // stdout carries the summary without the config block
  const auto printed = json::parse(r.out);
  CHECK(printed.at("steps") == 4);
  CHECK_FALSE(printed.contains("config"));
  const auto run = read_jsonl(dir.path / "d" / "run.jsonl");
  REQUIRE_FALSE(run.empty());
  CHECK(run.front().at("type") == "config");
  CHECK(run.front().at("config").at("seed") == 99);
}

TEST_CASE("--no-tag zeroes the tag terms and keeps their raw values") {
  TempDir dir;
  const auto corpus = synth(dir);
  auto args = distill_args(corpus, dir.path / "d");
  args.push_back("--no-tag");
  const auto r = cli(dir, args);
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  int tag_lines = 0;
  bool some_raw = false;
  for (const auto& line : read_jsonl(dir.path / "d" / "breakdown.jsonl")) {
    if (line.at("objective") != "tag") continue;
    ++tag_lines;
    CHECK(line.at("value").get<double>() == 0.0);
    CHECK(line.at("enabled") == false);
    some_raw = some_raw || line.at("raw").get<double>() > 0.0;
  }
  CHECK(tag_lines > 0);
  CHECK(some_raw);
}

TEST_CASE("distill, finetune, eval and export chain through the files they write") {
  TempDir dir;
  const auto corpus = synth(dir);
  const auto d = dir.path / "d";
  REQUIRE(cli(dir, distill_args(corpus, d)).exit_code == 0);
  CHECK(std::filesystem::exists(d / "student.ckpt.json"));
  CHECK(std::filesystem::exists(d / "teacher.ckpt.json"));

  const auto f = dir.path / "f";
  auto r = cli(dir, {"finetune", "--task", (corpus / "task.jsonl").string(), "--vocab",
                     (corpus / "student_vocab.txt").string(), "--init", (d / "student.ckpt.json").string(), "--out",
                     f.string(), "--set", "train.stages.0.epochs=1", "train.stages.1.epochs=1"});
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  const auto summary = json::parse(r.out);
  CHECK(summary.at("examples").get<int>() + summary.at("skipped").get<int>() == 16);
  CHECK(std::filesystem::exists(f / "answers.tsv"));

  r = cli(dir, {"eval", "--task", (corpus / "task.jsonl").string(), "--vocab", (corpus / "student_vocab.txt").string(),
                "--answers", (f / "answers.tsv").string(), "--model", (f / "model.ckpt.json").string(), "--out",
                (dir.path / "e").string()});
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  const auto report = json::parse(read_file(dir.path / "e" / "report.json"));
  CHECK(report.contains("accuracy"));
  CHECK(read_jsonl(dir.path / "e" / "predictions.jsonl").size() == 16);

  const std::string tag = read_jsonl(corpus / "task.jsonl").front().at("tags").at(0);
  r = cli(dir, {"export-embeddings", "--task", (corpus / "task.jsonl").string(), "--vocab",
                (corpus / "student_vocab.txt").string(), "--model", (f / "model.ckpt.json").string(), "--out",
                (dir.path / "x").string(), "--layer", "1", "--tokens", tag});
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  CHECK(json::parse(r.out).at("rows").get<int>() > 0);
}

TEST_CASE("reruns with the same inputs give identical outputs") {
  TempDir dir;
  const auto corpus = synth(dir);
  REQUIRE(cli(dir, distill_args(corpus, dir.path / "d1")).exit_code == 0);
  REQUIRE(cli(dir, distill_args(corpus, dir.path / "d2")).exit_code == 0);
  CHECK(read_file(dir.path / "d1" / "breakdown.jsonl") == read_file(dir.path / "d2" / "breakdown.jsonl"));
  CHECK(read_file(dir.path / "d1" / "student.ckpt.json").size() ==
        read_file(dir.path / "d2" / "student.ckpt.json").size());

  const std::vector<std::string> mix{"codemix",        "--parallel",      (corpus / "parallel.jsonl").string(),
                                     "--teacher-vocab", (corpus / "teacher_vocab.txt").string(),
                                     "--student-vocab", (corpus / "student_vocab.txt").string()};
  auto a = mix, b = mix;
  a.insert(a.end(), {"--out", (dir.path / "m1").string()});
  b.insert(b.end(), {"--out", (dir.path / "m2").string()});
  REQUIRE(cli(dir, a).exit_code == 0);
  REQUIRE(cli(dir, b).exit_code == 0);
  CHECK(read_file(dir.path / "m1" / "codemix.jsonl") == read_file(dir.path / "m2" / "codemix.jsonl"));
}

TEST_CASE("relative --out resolves under XLKD_OUTPUT_ROOT") {
  TempDir dir;
  const std::string root = (dir.path / "root").string();
  const int status = std::system(("XLKD_OUTPUT_ROOT=" + shell_quote(root) + " " + shell_quote(kCli) +
                                  " -q synth --pairs 2 --tasks 2 --out rel >/dev/null 2>&1")
                                     .c_str());
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(std::filesystem::exists(dir.path / "root" / "rel" / "parallel.jsonl"));
}
