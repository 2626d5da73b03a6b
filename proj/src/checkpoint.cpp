#include <cmath>
#include <fstream>
#include <limits>

#include "xlkd/errors.hpp"
#include "xlkd/model.hpp"

namespace xlkd {

namespace {
constexpr const char* kFormat = "xlkd-checkpoint";
constexpr int kVersion = 1;

// JSON has no NaN or infinity; diagnostic snapshots may hold them.
nlohmann::json encode_values(const Matrix& m) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = m.data()[i];
    if (std::isfinite(v)) {
      out.push_back(v);
    } else {
      out.push_back(std::isnan(v) ? "nan" : v > 0 ? "inf" : "-inf");
    }
  }
  return out;
}

double decode_value(const nlohmann::json& v) {
  if (v.is_number()) return v.get<double>();
  const std::string s = v.get<std::string>();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  throw FormatError("bad parameter value '" + s + "'");
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["config"] = ckpt.model.config();
  j["step"] = ckpt.step;
  j["metrics"] = ckpt.metrics;
  j["config_echo"] = ckpt.config_echo;
  auto& params = j["parameters"] = nlohmann::json::array();
  for (const auto& p : ckpt.model.parameters()) {
    params.push_back({{"name", p.name}, {"group", p.group}, {"rows", p.value.rows()}, {"cols", p.value.cols()},
                      {"data", encode_values(p.value)}});
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kFormat) throw FormatError(path.string() + " is not a checkpoint");
  if (j.value("version", 0) != kVersion) throw FormatError(path.string() + ": unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.model = Model(j.at("config").get<ModelConfig>());
  ckpt.step = j.value("step", 0L);
  ckpt.metrics = j.value("metrics", nlohmann::json::array());
  ckpt.config_echo = j.value("config_echo", nlohmann::json::object());
  auto& params = ckpt.model.parameters();
  const auto& stored = j.at("parameters");
  if (stored.size() != params.size()) throw FormatError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = stored[i];
    if (s.at("name").get<std::string>() != params[i].name) {
      throw FormatError(path.string() + ": expected parameter " + params[i].name);
    }
    const auto rows = s.at("rows").get<Eigen::Index>(), cols = s.at("cols").get<Eigen::Index>();
    std::vector<double> data;
    try {
      for (const auto& v : s.at("data")) data.push_back(decode_value(v));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + params[i].name + ": " + e.what());
    }
    if (rows != params[i].value.rows() || cols != params[i].value.cols() ||
        static_cast<Eigen::Index>(data.size()) != rows * cols) {
      throw FormatError(path.string() + ": shape mismatch for " + params[i].name);
    }
    params[i].value = Eigen::Map<const Matrix>(data.data(), rows, cols);
  }
  return ckpt;
}

}  // namespace xlkd
