#pragma once

#include <filesystem>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xlkd/data.hpp"
#include "xlkd/model.hpp"
#include "xlkd/tokenize.hpp"

namespace xlkd::test {

inline SubwordVocab make_vocab(const std::vector<std::string>& words) {
  std::vector<std::string> e{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  e.insert(e.end(), words.begin(), words.end());
  return SubwordVocab(e);
}

inline ModelConfig toy_config(int vocab_size, int num_layers = 2, int num_classes = 3) {
  ModelConfig c;
  c.hidden_size = 16;
  c.num_layers = num_layers;
  c.num_heads = 2;
  c.intermediate_size = 32;
  c.feature_dim = 6;
  c.max_text_tokens = 32;
  c.max_image_tokens = 6;
  c.dropout = 0.0;
  c.attention_dropout = 0.0;
  c.vocab_size = vocab_size;
  c.num_classes = num_classes;
  return c;
}

inline Matrix random_features(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  return Matrix(rows, cols).unaryExpr([&](double) { return n(rng); });
}

inline ExampleRecord make_record(std::string question, std::vector<std::string> tags, int regions, int feature_dim,
                                 std::uint64_t seed = 1) {
  ExampleRecord r;
  r.question_id = "q" + std::to_string(seed);
  r.image_id = "img" + std::to_string(seed);
  r.question = std::move(question);
  r.lang = "en";
  r.answers = {{"yes", 1}};
  r.tags = std::move(tags);
  r.features = random_features(regions, feature_dim, seed);
  return r;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("xlkd_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::string> strings(const TokenizedText& t) {
  std::vector<std::string> out;
  for (const auto& s : t.subwords) out.push_back(s.text);
  return out;
}

}  // namespace xlkd::test

namespace xlkd::test {

// Loss value of `objective` with every parameter held constant.
inline double objective_value(const Model& model, const Objective& objective) {
  ad::Tape tape;
  ModelBinding b(tape, model, false);
  return tape.scalar(objective(b));
}

struct FdReport {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Central differences over every entry of every parameter selected by
// `include`. Relative error is |g - fd| / max(|g|, |fd|, floor).
inline FdReport fd_check(Model& model, const Objective& objective, const std::vector<Matrix>& grads, double h,
                         double floor, const std::function<bool(const Parameter&)>& include = {}) {
  FdReport r;
  auto& params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (include && !include(params[k])) continue;
    Matrix& value = params[k].value;
    for (Eigen::Index e = 0; e < value.size(); ++e) {
      const double saved = value(e);
      value(e) = saved + h;
      const double up = objective_value(model, objective);
      value(e) = saved - h;
      const double down = objective_value(model, objective);
      value(e) = saved;
      const double fd = (up - down) / (2.0 * h);
      const double g = grads[k](e);
      const double abs_err = std::abs(g - fd);
      const double rel = abs_err / std::max({std::abs(g), std::abs(fd), floor});
      r.max_abs = std::max(r.max_abs, abs_err);
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = params[k].name + "[" + std::to_string(e) + "] g=" + std::to_string(g) + " fd=" + std::to_string(fd);
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace xlkd::test

namespace xlkd::test {

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

inline std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// Runs `program args...` through the shell, capturing stdout and stderr.
inline CommandResult run_command(const std::string& program, const std::vector<std::string>& args,
                                 const std::filesystem::path& scratch) {
  const auto out_path = scratch / ".cmd_stdout";
  const auto err_path = scratch / ".cmd_stderr";
  std::string cmd = shell_quote(program);
  for (const auto& a : args) cmd += " " + shell_quote(a);
  cmd += " >" + shell_quote(out_path.string()) + " 2>" + shell_quote(err_path.string());
  const int status = std::system(cmd.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  return r;
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace xlkd::test
