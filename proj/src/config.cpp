#include "cbav/config.hpp"

#include "cbav/errors.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <variant>
#include <vector>

namespace cbav {

namespace {

using Slot = std::variant<double*, int*, bool*, std::uint64_t*>;

struct Key {
  std::string section;
  std::string name;
  Slot slot;
};

std::vector<Key> keys_of(TrainConfig& c) {
  return {
      {"loss", "lambda_n", &c.lambda_n},
      {"loss", "lambda_sdf", &c.lambda_sdf},
      {"loss", "lambda_rgb", &c.lambda_rgb},
      {"loss", "lambda_reg", &c.lambda_reg},
      {"loss", "lambda_r1", &c.lambda_r1},
      {"loss", "lambda_adv", &c.lambda_adv},
      {"optimizer", "lr", &c.lr},
      {"optimizer", "beta1", &c.adam_beta1},
      {"optimizer", "beta2", &c.adam_beta2},
      {"optimizer", "eps", &c.adam_eps},
      {"schedule", "points_per_iter", &c.points_per_iter},
      {"schedule", "batch_subjects", &c.batch_subjects},
      {"schedule", "epochs", &c.epochs},
      {"schedule", "iterations", &c.iterations},
      {"schedule", "checkpoint_every", &c.checkpoint_every},
      {"schedule", "seed", &c.seed},
      {"model", "feature_dim", &c.feature_dim},
      {"model", "hidden_width", &c.hidden_width},
      {"model", "pca_dim_geometry", &c.pca_dim_geometry},
      {"model", "pca_dim_texture", &c.pca_dim_texture},
      {"sampling", "shell_narrow", &c.shell_narrow},
      {"sampling", "shell_wide", &c.shell_wide},
      {"sampling", "free_fraction", &c.free_fraction},
      {"sampling", "fd_eps", &c.fd_eps},
      {"adversarial", "enabled", &c.adversarial},
      {"adversarial", "every", &c.adv_every},
      {"adversarial", "patches_per_step", &c.patches_per_step},
      {"adversarial", "patch_size", &c.patch_size},
      {"adversarial", "image_size", &c.image_size},
      {"adversarial", "ray_steps", &c.ray_steps},
      {"adversarial", "ray_refine", &c.ray_refine},
      {"adversarial", "ring_radius", &c.ring_radius},
      {"adversarial", "camera_fov", &c.camera_fov},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

struct Entry {
  std::string value;
  int line = 0;
};

[[noreturn]] void fail(const std::string& where, int line, const std::string& msg) {
  throw ConfigError(where + ":" + std::to_string(line) + ": " + msg);
}

std::string as_string(const std::string& key, const Entry& e, const std::string& where) {
  if (e.value.size() < 2 || e.value.front() != '"' || e.value.back() != '"')
    fail(where, e.line, "key '" + key + "' expects a quoted string");
  return e.value.substr(1, e.value.size() - 2);
}

template <typename T>
T as_integer(const std::string& key, const Entry& e, const std::string& where) {
  T v{};
  const char* first = e.value.data();
  const char* last = first + e.value.size();
  if (!e.value.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) fail(where, e.line, "key '" + key + "' expects an integer, got " + e.value);
  return v;
}

double as_double(const std::string& key, const Entry& e, const std::string& where) {
  std::istringstream ss(e.value);
  ss.imbue(std::locale::classic());
  double v = 0.0;
  if (!(ss >> v) || !(ss >> std::ws).eof())
    fail(where, e.line, "key '" + key + "' expects a number, got " + e.value);
  return v;
}

bool as_bool(const std::string& key, const Entry& e, const std::string& where) {
  if (e.value == "true") return true;
  if (e.value == "false") return false;
  fail(where, e.line, "key '" + key + "' expects true or false, got " + e.value);
}

}  // namespace

TrainConfig preset_config(const std::string& name) {
  if (name == "desk") return TrainConfig::desk();
  if (name == "paper") return TrainConfig::paper();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  std::map<std::string, Entry> entries;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(source, line_no, "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) fail(source, line_no, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(source, line_no, "expected key = value");
    const std::string name = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (name.empty()) fail(source, line_no, "missing key name");
    if (value.empty()) fail(source, line_no, "key '" + name + "' has no value");
    const std::string full = section.empty() ? name : section + "." + name;
    if (!entries.emplace(full, Entry{value, line_no}).second) fail(source, line_no, "duplicate key '" + full + "'");
  }

  RunConfig out;
  for (const char* required : {"preset", "template"})
    if (!entries.count(required)) throw ConfigError(source + ": missing required key '" + std::string(required) + "'");
  out.preset = as_string("preset", entries.at("preset"), source);
  out.template_name = as_string("template", entries.at("template"), source);
  try {
    out.train = preset_config(out.preset);
  } catch (const ConfigError& e) {
    fail(source, entries.at("preset").line, e.what());
  }

  std::map<std::string, Slot> slots;
  for (const Key& k : keys_of(out.train)) slots.emplace(k.section + "." + k.name, k.slot);
  for (const auto& [key, entry] : entries) {
    if (key == "preset" || key == "template") continue;
    const auto it = slots.find(key);
    if (it == slots.end()) fail(source, entry.line, "unknown key '" + key + "'");
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>)
            *p = as_double(key, entry, source);
          else if constexpr (std::is_same_v<T, bool>)
            *p = as_bool(key, entry, source);
          else
            *p = as_integer<T>(key, entry, source);
        },
        it->second);
  }
  out.train.validate();
  return out;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string format_run_config(const RunConfig& config) {
  RunConfig copy = config;
  std::ostringstream out;
  out.imbue(std::locale::classic());
  out << "preset = \"" << copy.preset << "\"\n";
  out << "template = \"" << copy.template_name << "\"\n";
  std::string section;
  for (const Key& k : keys_of(copy.train)) {
    if (k.section != section) {
      section = k.section;
      out << "\n[" << section << "]\n";
    }
    out << k.name << " = ";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, double>) {
            char buf[32];
            const auto res = std::to_chars(buf, buf + sizeof(buf), *p);
            out << std::string(buf, res.ptr);
          }
          else if constexpr (std::is_same_v<T, bool>)
            out << (*p ? "true" : "false");
          else
            out << *p;
        },
        k.slot);
    out << '\n';
  }
  return out.str();
}

}  // namespace cbav
