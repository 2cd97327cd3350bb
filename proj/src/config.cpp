#include "mmshare/config.hpp"

#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmshare/data.hpp"

namespace mmshare {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const ConfigEntry& e, std::string_view expected) {
  throw ConfigError(e.key + ": expected " + std::string(expected) + ", got '" + e.value + "' (line " +
                    std::to_string(e.line) + ")");
}

template <typename Int>
Int parse_int(const ConfigEntry& e) {
  Int v{};
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) bad_value(e, "an integer");
  return v;
}

double parse_real(std::string_view field, std::string_view text) {
  double v = 0;
  const auto* first = text.data();
  const auto* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ConfigError(std::string(field) + ": expected a number, got '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto end = comma == std::string_view::npos ? text.size() : comma;
    out.push_back(trim(text.substr(start, end - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

std::vector<ConfigEntry> parse_key_values(std::string_view text) {
  std::vector<ConfigEntry> entries;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty section header");
      entries.push_back({section, "", "", line_no});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    ConfigEntry e{section, trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)),
                  line_no};
    if (e.key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Index> parse_index_list(std::string_view field, std::string_view text) {
  std::vector<Index> out;
  for (const auto& item : split_list(text)) {
    ConfigEntry e{"", std::string(field), item, 0};
    out.push_back(parse_int<Index>(e));
  }
  return out;
}

std::vector<double> parse_double_list(std::string_view field, std::string_view text) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) out.push_back(parse_real(field, item));
  return out;
}

bool apply_config_entry(TrainConfig& c, const ConfigEntry& e) {
  const std::string& k = e.key;
  ModelConfig& m = c.model;
  auto index_or_auto = [&](Index& field) { field = e.value == "auto" ? 0 : parse_int<Index>(e); };
  if (k == "d_model") m.d_model = parse_int<Index>(e);
  else if (k == "identifier") m.identifier = parse_identifier_kind(e.value);
  else if (k == "modality_dim") index_or_auto(m.modality_dim);
  else if (k == "n_heads") m.n_heads = parse_int<Index>(e);
  else if (k == "mlp_ratio") m.mlp_ratio = parse_int<Index>(e);
  else if (k == "early_layers") m.early_layers = parse_int<Index>(e);
  else if (k == "shared_layers") m.shared_layers = parse_int<Index>(e);
  else if (k == "late_layers") m.late_layers = parse_int<Index>(e);
  else if (k == "proj_dim") index_or_auto(m.proj_dim);
  else if (k == "patch_size") m.patch_size = parse_int<Index>(e);
  else if (k == "init_temperature") m.init_temperature = parse_real(k, e.value);
  else if (k == "steps") c.steps = parse_int<std::size_t>(e);
  else if (k == "batch_size") c.batch_size = parse_int<std::size_t>(e);
  else if (k == "lr") c.adam.lr = parse_real(k, e.value);
  else if (k == "beta1") c.adam.beta1 = parse_real(k, e.value);
  else if (k == "beta2") c.adam.beta2 = parse_real(k, e.value);
  else if (k == "eps") c.adam.eps = parse_real(k, e.value);
  else if (k == "seed") c.seed = parse_int<std::uint64_t>(e);
  else if (k == "eval_every") c.eval_every = parse_int<std::size_t>(e);
  else if (k == "eval_k") c.eval_k = parse_index_list(k, e.value);
  else if (k == "data_size") c.data_size = parse_int<std::size_t>(e);
  else if (k == "data_seed") c.data_seed = parse_int<std::uint64_t>(e);
  else if (k == "train_fraction") c.train_fraction = parse_real(k, e.value);
  else return false;
  return true;
}

void resolve_defaults(TrainConfig& c) {
  ModelConfig& m = c.model;
  m.vocab_size = kVocabSize;
  m.max_seq_len = kCaptionLength;
  m.image_size = kImageSize;
  m.channels = kImageChannels;
  if (m.identifier == IdentifierKind::FeatureVector && m.modality_dim == 0) m.modality_dim = default_modality_dim(m.d_model);
  if (m.proj_dim == 0) m.proj_dim = m.d_model;
}

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 2) throw ConfigError("batch_size: contrastive training needs at least 2 pairs per batch");
  if (data_size < 1) throw ConfigError("data_size: must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction: must be in (0, 1]");
  if (!(adam.lr > 0.0)) throw ConfigError("lr: must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("beta1: must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("beta2: must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("eps: must be > 0");
  if (eval_k.empty()) throw ConfigError("eval_k: needs at least one value");
  for (Index k : eval_k)
    if (k < 1) throw ConfigError("eval_k: values must be >= 1");
}

TrainConfig parse_train_config(std::string_view text) {
  TrainConfig c;
  c.model.proj_dim = 0;  // follows d_model unless given
  for (const auto& e : parse_key_values(text)) {
    if (!e.section.empty()) throw ConfigError("line " + std::to_string(e.line) + ": sections are not allowed in a run config");
    if (!apply_config_entry(c, e)) throw ConfigError(e.key + ": unknown key (line " + std::to_string(e.line) + ")");
  }
  resolve_defaults(c);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) { return parse_train_config(read_text_file(path)); }

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw ContractError("format_double failed");
  return std::string(buf, ptr);
}

std::string canonical_text(const TrainConfig& c) {
  std::ostringstream os;
  const ModelConfig& m = c.model;
  os << "d_model = " << m.d_model << '\n'
     << "identifier = " << to_string(m.identifier) << '\n'
     << "modality_dim = " << m.modality_dim << '\n'
     << "n_heads = " << m.n_heads << '\n'
     << "mlp_ratio = " << m.mlp_ratio << '\n'
     << "early_layers = " << m.early_layers << '\n'
     << "shared_layers = " << m.shared_layers << '\n'
     << "late_layers = " << m.late_layers << '\n'
     << "proj_dim = " << m.proj_dim << '\n'
     << "patch_size = " << m.patch_size << '\n'
     << "init_temperature = " << format_double(m.init_temperature) << '\n'
     << "steps = " << c.steps << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "lr = " << format_double(c.adam.lr) << '\n'
     << "beta1 = " << format_double(c.adam.beta1) << '\n'
     << "beta2 = " << format_double(c.adam.beta2) << '\n'
     << "eps = " << format_double(c.adam.eps) << '\n'
     << "seed = " << c.seed << '\n'
     << "eval_every = " << c.eval_every << '\n'
     << "eval_k = ";
  for (std::size_t i = 0; i < c.eval_k.size(); ++i) os << (i ? "," : "") << c.eval_k[i];
  os << '\n'
     << "data_size = " << c.data_size << '\n'
     << "data_seed = " << c.data_seed << '\n'
     << "train_fraction = " << format_double(c.train_fraction) << '\n';
  return os.str();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const TrainConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_text(config))));
  return buf;
}

}  // namespace mmshare
