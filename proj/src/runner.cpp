#include "cirm/runner.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cirm::runner {

namespace {

using json = nlohmann::json;
using ordered = nlohmann::ordered_json;
using methods::ConfigError;

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads fields of one JSON object and rejects whatever was not read.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string at(const std::string& key) const { return join(path_, key); }

  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) out = as_number(*v, at(key));
  }
  void count(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = static_cast<std::size_t>(as_unsigned(*v, at(key)));
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) out = as_unsigned(*v, at(key));
  }
  void flag(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void text(const std::string& key, std::string& out) {
    if (const json* v = find(key)) out = as_text(*v, at(key));
  }
  void optional_text(const std::string& key, std::optional<std::string>& out) {
    if (const json* v = find(key)) {
      out = v->is_null() ? std::nullopt : std::optional<std::string>(as_text(*v, at(key)));
    }
  }
  void optional_count(const std::string& key, std::optional<std::size_t>& out) {
    if (const json* v = find(key)) {
      out = v->is_null() ? std::nullopt : std::optional<std::size_t>(as_unsigned(*v, at(key)));
    }
  }
  void numbers(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      const auto& arr = as_array(*v, at(key));
      out.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(as_number(arr[i], indexed(key, i)));
    }
  }
  void u64s(const std::string& key, std::vector<std::uint64_t>& out) {
    if (const json* v = find(key)) {
      const auto& arr = as_array(*v, at(key));
      out.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(as_unsigned(arr[i], indexed(key, i)));
    }
  }
  template <class E, class F>
  void choice(const std::string& key, E& out, F from_string) {
    if (const json* v = find(key)) {
      const std::string s = as_text(*v, at(key));
      try {
        out = from_string(s);
      } catch (const std::invalid_argument&) {
        throw ConfigError(at(key), "unknown value '" + s + "'");
      }
    }
  }
  std::string indexed(const std::string& key, std::size_t i) const { return at(key) + "[" + std::to_string(i) + "]"; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }
  }

  static const json& as_array(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path, "expected an array");
    return v;
  }

 private:
  static double as_number(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    return v.get<double>();
  }
  static std::uint64_t as_unsigned(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) throw ConfigError(path, "must be >= 0");
    throw ConfigError(path, "expected a non-negative integer");
  }
  static std::string as_text(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    return v.get<std::string>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

methods::KlScale kl_scale_from_string(const std::string& s) {
  if (s == "batch") return methods::KlScale::Batch;
  if (s == "dataset") return methods::KlScale::Dataset;
  throw std::invalid_argument(s);
}
std::string to_string(methods::KlScale k) { return k == methods::KlScale::Batch ? "batch" : "dataset"; }

SecondOrderMode second_order_from_string(const std::string& s) {
  if (s == "nested") return SecondOrderMode::Nested;
  if (s == "finite_difference") return SecondOrderMode::FiniteDifference;
  throw std::invalid_argument(s);
}
std::string to_string(SecondOrderMode m) { return m == SecondOrderMode::Nested ? "nested" : "finite_difference"; }

methods::MethodConfig parse_method(const json& j, const std::string& path) {
  Fields f(j, path);
  const json* id = f.find("id");
  if (!id) throw ConfigError(f.at("id"), "required");
  if (!id->is_string()) throw ConfigError(f.at("id"), "expected a string");
  methods::MethodConfig m;
  try {
    m = methods::default_config(methods::method_from_string(id->get<std::string>()));
  } catch (const std::invalid_argument&) {
    throw ConfigError(f.at("id"), "unknown method '" + id->get<std::string>() + "'");
  }
  f.number("lambda", m.lambda);
  f.number("beta", m.beta);
  f.number("lr", m.lr);
  f.choice("optimizer", m.optimizer, optimizer_from_string);
  f.count("epochs", m.epochs);
  f.count("batch_size", m.batch_size);
  f.count("inner_iterations", m.inner_iterations);
  f.count("n_mc", m.n_mc);
  f.number("rho0", m.rho0);
  f.number("rho1", m.rho1);
  f.number("delta_rho", m.delta_rho);
  f.optional_count("penalty_anneal_epoch", m.penalty_anneal_epoch);
  f.number("dropout", m.dropout);
  f.number("weight_decay", m.weight_decay);
  f.u64("seed", m.seed);
  f.count("warm_start", m.warm_start);
  f.number("termination_accuracy", m.termination_accuracy);
  f.flag("skip_first_anchor", m.skip_first_anchor);
  f.choice("kl_scale", m.kl_scale, kl_scale_from_string);
  f.number("initial_sigma", m.initial_sigma);
  f.flag("mc_eval", m.mc_eval);
  f.flag("phi_constraint_terms", m.phi_constraint_terms);
  f.choice("second_order", m.second_order, second_order_from_string);
  f.finish();
  return m;
}

ordered method_json(const methods::MethodConfig& m) {
  ordered j;
  j["id"] = methods::to_string(m.method);
  j["lambda"] = m.lambda;
  j["beta"] = m.beta;
  j["lr"] = m.lr;
  j["optimizer"] = to_string(m.optimizer);
  j["epochs"] = m.epochs;
  j["batch_size"] = m.batch_size;
  j["inner_iterations"] = m.inner_iterations;
  j["n_mc"] = m.n_mc;
  j["rho0"] = m.rho0;
  j["rho1"] = m.rho1;
  j["delta_rho"] = m.delta_rho;
  j["penalty_anneal_epoch"] = m.penalty_anneal_epoch ? ordered(*m.penalty_anneal_epoch) : ordered(nullptr);
  j["dropout"] = m.dropout;
  j["weight_decay"] = m.weight_decay;
  j["seed"] = m.seed;
  j["warm_start"] = m.warm_start;
  j["termination_accuracy"] = m.termination_accuracy;
  j["skip_first_anchor"] = m.skip_first_anchor;
  j["kl_scale"] = to_string(m.kl_scale);
  j["initial_sigma"] = m.initial_sigma;
  j["mc_eval"] = m.mc_eval;
  j["phi_constraint_terms"] = m.phi_constraint_terms;
  j["second_order"] = to_string(m.second_order);
  return j;
}

std::vector<methods::MethodConfig> default_methods(harness::DatasetKind kind) {
  using methods::Method;
  const std::vector<Method> ids = kind == harness::DatasetKind::Sem
                                      ? std::vector<Method>{Method::Birm, Method::Irmv1, Method::Erm}
                                      : std::vector<Method>{Method::CBvirm, Method::CVirmg, Method::CVirmv1, Method::Erm,
                                                            Method::Irmg, Method::Irmv1, Method::Vcl};
  std::vector<methods::MethodConfig> out;
  for (auto m : ids) out.push_back(methods::default_config(m));
  return out;
}

RunConfig parse_root(const json& root) {
  Fields f(root, "");
  RunConfig cfg;
  auto& p = cfg.plan;
  f.text("experiment", p.name);
  f.text("output_dir", cfg.output_dir);
  if (const json* d = f.find("dataset")) {
    Fields df(*d, "dataset");
    df.choice("kind", p.dataset.kind, harness::dataset_kind_from_string);
    df.text("name", p.dataset.name);
    df.optional_text("idx_images", p.dataset.idx_images);
    df.optional_text("idx_labels", p.dataset.idx_labels);
    df.count("fallback_size", p.dataset.fallback_size);
    df.choice("binarize", p.dataset.binarize, env::binarize_rule_from_string);
    df.finish();
  }
  f.count("n_envs", p.n_envs);
  f.choice("scheme", p.scheme, env::color_scheme_from_string);
  f.numbers("p_c", p.p_c);
  f.number("label_flip", p.label_flip);
  f.number("test_p_c", p.test_p_c);
  f.numbers("sigma_e", p.sigma_e);
  f.number("sigma_1", p.sigma_1);
  f.number("test_sigma_e", p.test_sigma_e);
  f.count("samples_per_env", p.samples_per_env);
  f.count("test_samples", p.test_samples);
  f.count("repetitions", p.repetitions);
  f.u64s("seeds", p.seeds);
  f.u64("data_seed", p.data_seed);
  f.flag("sequential", p.sequential);
  f.count("hidden", p.hidden);
  f.count("eval_samples", p.eval_samples);
  if (const json* ms = f.find("methods")) {
    const auto& arr = Fields::as_array(*ms, "methods");
    for (std::size_t i = 0; i < arr.size(); ++i) p.methods.push_back(parse_method(arr[i], f.indexed("methods", i)));
  } else {
    p.methods = default_methods(p.dataset.kind);
  }
  f.finish();

  const bool colored = p.dataset.kind == harness::DatasetKind::Colored;
  if (colored && !root.contains("p_c")) p.p_c = env::default_p_c_schedule(p.n_envs);
  if (!colored && !root.contains("sigma_e") && p.n_envs == 2) p.sigma_e = {0.1, 1.5};
  p.validate();
  return cfg;
}

std::string hex(const unsigned char* md, unsigned len) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += digits[md[i] >> 4];
    out += digits[md[i] & 0xf];
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw std::runtime_error("results line " + std::to_string(line_no) + ": unterminated quote");
  out.push_back(cur);
  return out;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string metric_cell(const std::string& metric, double mean, double stddev) {
  if (metric == "accuracy") return harness::format_cell(mean, stddev);
  return fmt("%.3f", mean) + " (" + fmt("%.3f", stddev) + ")";
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    std::size_t col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("line " + std::to_string(line) + ", column " + std::to_string(col), "invalid JSON");
  }
  if (root.is_object() && root.contains("manifest_version")) {
    const auto it = root.find("config");
    if (it == root.end()) throw ConfigError("config", "manifest has no config");
    return parse_root(*it);
  }
  return parse_root(root);
}

RunConfig load_config(const std::filesystem::path& path) {
  auto cfg = parse_config(read_file(path));
  const auto anchor = [&](std::optional<std::string>& p) {
    if (p && std::filesystem::path(*p).is_relative()) p = (path.parent_path() / *p).lexically_normal().string();
  };
  anchor(cfg.plan.dataset.idx_images);
  anchor(cfg.plan.dataset.idx_labels);
  return cfg;
}

std::string serialize_config(const RunConfig& cfg, int indent) {
  const auto& p = cfg.plan;
  ordered j;
  j["experiment"] = p.name;
  j["output_dir"] = cfg.output_dir;
  ordered d;
  d["kind"] = harness::to_string(p.dataset.kind);
  d["name"] = p.dataset.name;
  d["idx_images"] = p.dataset.idx_images ? ordered(*p.dataset.idx_images) : ordered(nullptr);
  d["idx_labels"] = p.dataset.idx_labels ? ordered(*p.dataset.idx_labels) : ordered(nullptr);
  d["fallback_size"] = p.dataset.fallback_size;
  d["binarize"] = env::to_string(p.dataset.binarize);
  j["dataset"] = d;
  j["n_envs"] = p.n_envs;
  j["scheme"] = env::to_string(p.scheme);
  j["p_c"] = p.p_c;
  j["label_flip"] = p.label_flip;
  j["test_p_c"] = p.test_p_c;
  j["sigma_e"] = p.sigma_e;
  j["sigma_1"] = p.sigma_1;
  j["test_sigma_e"] = p.test_sigma_e;
  j["samples_per_env"] = p.samples_per_env;
  j["test_samples"] = p.test_samples;
  j["repetitions"] = p.repetitions;
  j["seeds"] = p.seeds;
  j["data_seed"] = p.data_seed;
  j["sequential"] = p.sequential;
  j["hidden"] = p.hidden;
  j["eval_samples"] = p.eval_samples;
  ordered ms = ordered::array();
  for (const auto& m : p.methods) ms.push_back(method_json(m));
  j["methods"] = ms;
  return j.dump(indent);
}

std::string git_blob_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("sha1 digest failed");
  }
  return hex(md, len);
}

std::string git_blob_hash_file(const std::filesystem::path& path) { return git_blob_hash(read_file(path)); }

std::string manifest_json(const RunConfig& cfg, const std::string& config_text, bool fallback) {
  const std::string resolved = serialize_config(cfg, -1);
  ordered inputs = ordered::array();
  std::string all;
  const auto add = [&](const std::string& role, const std::optional<std::string>& path, const std::string& blob) {
    ordered e;
    e["role"] = role;
    e["path"] = path ? ordered(*path) : ordered(nullptr);
    e["blob"] = blob;
    inputs.push_back(e);
    all += blob;
  };
  add("config", std::nullopt, git_blob_hash(config_text));
  if (!fallback && cfg.plan.dataset.kind == harness::DatasetKind::Colored) {
    add("idx_images", cfg.plan.dataset.idx_images, git_blob_hash_file(*cfg.plan.dataset.idx_images));
    add("idx_labels", cfg.plan.dataset.idx_labels, git_blob_hash_file(*cfg.plan.dataset.idx_labels));
  }
  ordered m;
  m["manifest_version"] = 1;
  m["config"] = ordered::parse(resolved);
  m["config_blob"] = git_blob_hash(resolved);
  m["inputs"] = inputs;
  m["content_hash"] = git_blob_hash(all);
  m["synthetic_fallback"] = fallback;
  return m.dump(2);
}

ResultsWriter::ResultsWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  out_ << kCsvHeader << '\n';
  out_.flush();
}

void ResultsWriter::append(const std::vector<harness::MetricsRecord>& records) {
  std::string chunk;
  for (const auto& r : records) chunk += csv_row(r) + '\n';
  out_ << chunk;
  out_.flush();
  if (!out_) throw std::runtime_error("results write failed");
}

std::string csv_row(const harness::MetricsRecord& r) {
  return quote_csv(r.experiment) + ',' + quote_csv(r.method) + ',' + std::to_string(r.seed) + ',' +
         std::to_string(r.env_index) + ',' + harness::to_string(r.phase) + ',' + quote_csv(r.metric) + ',' +
         fmt("%.17g", r.value) + ',' + fmt("%.3f", r.wall_time_ms);
}

std::vector<harness::MetricsRecord> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw std::runtime_error("results: unexpected header");
  std::vector<harness::MetricsRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line, line_no);
    if (f.size() != 8) throw std::runtime_error("results line " + std::to_string(line_no) + ": expected 8 fields");
    try {
      harness::MetricsRecord r;
      r.experiment = f[0];
      r.method = f[1];
      r.seed = std::stoull(f[2]);
      r.env_index = std::stoull(f[3]);
      if (f[4] != "train" && f[4] != "test") throw std::invalid_argument("phase");
      r.phase = f[4] == "train" ? harness::Phase::Train : harness::Phase::Test;
      r.metric = f[5];
      r.value = std::stod(f[6]);
      r.wall_time_ms = std::stod(f[7]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw std::runtime_error("results line " + std::to_string(line_no) + ": malformed field");
    }
  }
  return out;
}

std::vector<harness::MetricsRecord> read_results_csv(const std::filesystem::path& path) {
  return parse_results_csv(read_file(path));
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<harness::SummaryRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "experiment,method,phase,env_index,metric,mean,std,count\n";
  for (const auto& r : rows) {
    out << quote_csv(r.experiment) << ',' << quote_csv(r.method) << ',' << harness::to_string(r.phase) << ','
        << r.env_index << ',' << quote_csv(r.metric) << ',' << fmt("%.17g", r.mean) << ','
        << fmt("%.17g", r.stddev) << ',' << r.count << '\n';
  }
}

GroupBy group_by_from_string(const std::string& s) {
  if (s == "method") return GroupBy::Method;
  if (s == "experiment") return GroupBy::Experiment;
  throw std::invalid_argument("unknown grouping '" + s + "'");
}

Report make_report(const std::vector<harness::MetricsRecord>& records, GroupBy group_by) {
  const auto rows = harness::aggregate(records);
  std::map<std::pair<std::string, std::string>, std::size_t> last_env;
  std::set<std::string> methods;
  std::vector<std::string> experiments;
  for (const auto& r : rows) {
    auto& e = last_env[{r.experiment, r.method}];
    e = std::max(e, r.env_index);
    methods.insert(r.method);
    if (std::find(experiments.begin(), experiments.end(), r.experiment) == experiments.end()) {
      experiments.push_back(r.experiment);
    }
  }
  Report rep;
  rep.columns.assign(methods.begin(), methods.end());
  const auto column = [&](const std::string& m) {
    return static_cast<std::size_t>(std::find(rep.columns.begin(), rep.columns.end(), m) - rep.columns.begin());
  };
  const auto final_row = [&](const harness::SummaryRow& r) {
    return r.env_index == last_env[{r.experiment, r.method}];
  };

  std::vector<std::string> keys;
  std::map<std::string, std::vector<std::string>> table;
  const auto cell = [&](const std::string& key) -> std::vector<std::string>& {
    auto it = table.find(key);
    if (it == table.end()) {
      keys.push_back(key);
      it = table.emplace(key, std::vector<std::string>(rep.columns.size(), "-")).first;
    }
    return it->second;
  };

  if (group_by == GroupBy::Method) {
    for (auto phase : {harness::Phase::Train, harness::Phase::Test}) {
      for (const auto& r : rows) {
        if (r.phase != phase || !final_row(r)) continue;
        std::string key = harness::to_string(phase) + " " + r.metric;
        if (experiments.size() > 1) key = r.experiment + ": " + key;
        cell(key)[column(r.method)] = metric_cell(r.metric, r.mean, r.stddev);
      }
    }
  } else {
    for (const auto& exp : experiments) {
      std::set<std::string> metrics;
      for (const auto& r : rows) {
        if (r.experiment == exp && r.phase == harness::Phase::Test) metrics.insert(r.metric);
      }
      const std::string metric = metrics.count("accuracy")          ? "accuracy"
                                 : metrics.count("noncausal_error") ? "noncausal_error"
                                                                    : *metrics.begin();
      for (const auto& r : rows) {
        if (r.experiment != exp || r.phase != harness::Phase::Test || r.metric != metric || !final_row(r)) continue;
        cell(exp + " " + metric)[column(r.method)] = metric_cell(r.metric, r.mean, r.stddev);
      }
    }
  }
  rep.row_labels = keys;
  for (const auto& k : keys) rep.cells.push_back(table[k]);
  return rep;
}

std::string Report::to_text() const {
  std::size_t label_w = 0;
  for (const auto& l : row_labels) label_w = std::max(label_w, l.size());
  std::vector<std::size_t> w(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    w[c] = columns[c].size();
    for (const auto& row : cells) w[c] = std::max(w[c], row[c].size());
  }
  const auto pad = [](const std::string& s, std::size_t n) { return s + std::string(n - s.size(), ' '); };
  std::string out = pad("", label_w);
  for (std::size_t c = 0; c < columns.size(); ++c) out += "  " + pad(columns[c], w[c]);
  out += '\n';
  for (std::size_t r = 0; r < cells.size(); ++r) {
    out += pad(row_labels[r], label_w);
    for (std::size_t c = 0; c < columns.size(); ++c) out += "  " + pad(cells[r][c], w[c]);
    out += '\n';
  }
  return out;
}

std::string Report::to_csv() const {
  std::string out = "row";
  for (const auto& c : columns) out += ',' + quote_csv(c);
  out += '\n';
  for (std::size_t r = 0; r < cells.size(); ++r) {
    out += quote_csv(row_labels[r]);
    for (const auto& c : cells[r]) out += ',' + quote_csv(c);
    out += '\n';
  }
  return out;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace cirm::runner
