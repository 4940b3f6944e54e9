#include "cirm/envgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "cirm/rng.hpp"

namespace cirm::env {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(const std::vector<std::uint8_t>& raw, std::size_t at) {
  if (raw.size() < at + 4) throw IdxError(IdxError::Kind::Truncated, "idx: truncated header");
  return (std::uint32_t{raw[at]} << 24) | (std::uint32_t{raw[at + 1]} << 16) | (std::uint32_t{raw[at + 2]} << 8) |
         std::uint32_t{raw[at + 3]};
}

std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

IdxFile parse_idx(const std::vector<std::uint8_t>& raw) {
  const std::uint32_t magic = read_be32(raw, 0);
  IdxFile f;
  std::size_t header = 0;
  if (magic == kImageMagic) {
    f.is_images = true;
    f.count = read_be32(raw, 4);
    f.rows = read_be32(raw, 8);
    f.cols = read_be32(raw, 12);
    header = 16;
  } else if (magic == kLabelMagic) {
    f.count = read_be32(raw, 4);
    f.rows = f.cols = 1;
    header = 8;
  } else {
    throw IdxError(IdxError::Kind::BadMagic, "idx: bad magic " + hex32(magic));
  }
  const std::size_t payload = f.count * f.rows * f.cols;
  if (raw.size() < header + payload) {
    throw IdxError(IdxError::Kind::Truncated, "idx: expected " + std::to_string(payload) + " payload bytes, found " +
                                                  std::to_string(raw.size() - header));
  }
  f.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(header),
                 raw.begin() + static_cast<std::ptrdiff_t>(header + payload));
  return f;
}

IdxFile read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::Io, "idx: cannot open " + path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(raw);
}

BaseImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const IdxFile img = read_idx(images);
  const IdxFile lab = read_idx(labels);
  if (!img.is_images) throw IdxError(IdxError::Kind::BadMagic, "idx: " + images.string() + " is not an image file");
  if (lab.is_images) throw IdxError(IdxError::Kind::BadMagic, "idx: " + labels.string() + " is not a label file");
  if (img.count != lab.count) {
    throw IdxError(IdxError::Kind::CountMismatch, "idx: " + std::to_string(img.count) + " images but " +
                                                      std::to_string(lab.count) + " labels");
  }
  BaseImages out;
  out.rows = img.rows;
  out.cols = img.cols;
  out.images = Tensor({img.count, img.rows * img.cols});
  for (std::size_t i = 0; i < img.bytes.size(); ++i) out.images[i] = img.bytes[i] / 255.0;
  out.labels.assign(lab.bytes.begin(), lab.bytes.end());
  return out;
}

BaseImages synthetic_pattern_fallback(std::size_t n, std::uint64_t seed) {
  constexpr std::size_t side = 28;
  BaseImages out;
  out.images = Tensor({n, side * side});
  out.labels.resize(n);
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 10);
    out.labels[i] = c;
    RandomStream rng(seed, {i});
    const double cx = 13.5 + 6.0 * (rng.uniform() - 0.5);
    const double cy = 13.5 + 6.0 * (rng.uniform() - 0.5);
    double* px = out.images.data() + i * side * side;
    if (c < 5) {
      const double theta = c * pi / 5.0 + 0.2 * (rng.uniform() - 0.5);
      const double period = 5.0 + rng.uniform();
      const double phase = 2.0 * pi * rng.uniform();
      const double radius = 8.5 + 2.0 * rng.uniform();
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const double dx = x - cx, dy = y - cy;
          if (dx * dx + dy * dy > radius * radius) continue;
          const double u = dx * std::cos(theta) + dy * std::sin(theta);
          px[y * side + x] = std::max(0.0, std::cos(2.0 * pi * u / period + phase));
        }
      }
    } else {
      const int blobs = c - 4;
      const double spin = 0.4 * (rng.uniform() - 0.5);
      const double ring = blobs == 1 ? 0.0 : 7.0 + rng.uniform();
      const double width = blobs == 1 ? 4.0 : 2.2;
      for (int b = 0; b < blobs; ++b) {
        const double a = 2.0 * pi * b / blobs + spin;
        const double bx = cx + ring * std::cos(a), by = cy + ring * std::sin(a);
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
            double& v = px[y * side + x];
            v = std::max(v, std::exp(-d2 / (2.0 * width * width)));
          }
        }
      }
    }
    for (std::size_t k = 0; k < side * side; ++k) {
      const double noisy = std::clamp(px[k] + 0.05 * rng.normal(), 0.0, 1.0);
      px[k] = std::round(noisy * 255.0) / 255.0;
    }
  }
  return out;
}

std::string to_string(ColorScheme s) { return s == ColorScheme::B01 ? "b01" : "b11"; }

ColorScheme color_scheme_from_string(const std::string& s) {
  if (s == "b01") return ColorScheme::B01;
  if (s == "b11") return ColorScheme::B11;
  throw std::invalid_argument("unknown color scheme '" + s + "'");
}

std::string to_string(BinarizeRule r) { return r == BinarizeRule::Parity ? "parity" : "emnist_letters"; }

BinarizeRule binarize_rule_from_string(const std::string& s) {
  if (s == "parity") return BinarizeRule::Parity;
  if (s == "emnist_letters") return BinarizeRule::EmnistLetters;
  throw std::invalid_argument("unknown binarize rule '" + s + "'");
}

int binarize(int label, BinarizeRule rule) {
  if (rule == BinarizeRule::Parity) return label % 2;
  // letters are 1-based: a=1 ... z=26
  static constexpr char zero_letters[] = "acegikmoqsuvy";
  const char letter = static_cast<char>('a' + label - 1);
  for (const char* p = zero_letters; *p; ++p) {
    if (*p == letter) return 0;
  }
  return 1;
}

void EnvironmentData::require_access() const {
  if (lease && !lease->active.load()) throw IsolationError("environment data used after its phase ended");
}

std::vector<int> EnvironmentData::labels() const {
  std::vector<int> out(targets.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(targets[i]);
  return out;
}

EnvironmentData make_colored_env(const BaseImages& base, double label_flip, double p_c, ColorScheme scheme,
                                 BinarizeRule rule, std::size_t n, std::uint64_t seed) {
  if (label_flip < 0.0 || label_flip > 1.0) throw std::invalid_argument("make_colored_env: label_flip outside [0, 1]");
  if (p_c < 0.0 || p_c > 1.0) throw std::invalid_argument("make_colored_env: p_c outside [0, 1]");
  if (n > base.size()) {
    throw std::invalid_argument("make_colored_env: requested " + std::to_string(n) + " samples from " +
                                std::to_string(base.size()));
  }
  const std::size_t pixels = base.rows * base.cols;
  RandomStream rng(seed);
  const auto order = rng.permutation(base.size());
  EnvironmentData env;
  env.features = Tensor({n, 2 * pixels});
  env.targets = Tensor({n});
  env.meta = {EnvKind::Classification, p_c, label_flip, scheme, 0.0, 0.0, seed};
  env.clean_labels.resize(n);
  env.colors.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[i];
    int y = binarize(base.labels[src], rule);
    env.clean_labels[i] = y;
    if (rng.bernoulli(label_flip)) y = 1 - y;
    int z = y;
    if (rng.bernoulli(p_c)) z = 1 - z;
    env.targets[i] = y;
    env.colors[i] = z;
    const double* gray = base.images.data() + src * pixels;
    double* red = env.features.data() + i * 2 * pixels;
    double* green = red + pixels;
    double* colored = z == 1 ? red : green;
    if (scheme == ColorScheme::B01) {
      for (std::size_t k = 0; k < pixels; ++k) colored[k] = gray[k];
    } else {
      for (std::size_t k = 0; k < pixels; ++k) {
        if (gray[k] < kBackgroundThreshold) {
          colored[k] = 1.0;
        } else {
          red[k] = green[k] = gray[k];
        }
      }
    }
  }
  return env;
}

std::vector<double> default_p_c_schedule(std::size_t n_envs) {
  if (n_envs == 0) return {};
  if (n_envs == 1) return {0.15};
  if (n_envs == 2) return {0.2, 0.1};
  std::vector<double> out(n_envs);
  for (std::size_t t = 0; t < n_envs; ++t) out[t] = 0.1 + 0.1 * t / (n_envs - 1);
  return out;
}

EnvironmentData synth_sem(std::size_t n, double sigma_e, double sigma_1, std::uint64_t seed, std::size_t dim) {
  if (n == 0) throw std::invalid_argument("synth_sem: n must be at least 1");
  if (!(sigma_e > 0.0) || !(sigma_1 > 0.0)) throw std::invalid_argument("synth_sem: sigmas must be positive");
  RandomStream rng(seed);
  EnvironmentData env;
  env.features = Tensor({n, 2 * dim});
  env.targets = Tensor({n, dim});
  env.meta.kind = EnvKind::Regression;
  env.meta.sigma_e = sigma_e;
  env.meta.sigma_1 = sigma_1;
  env.meta.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double x1 = sigma_1 * rng.normal();
      const double y = x1 + sigma_e * rng.normal();
      const double x2 = y + rng.normal();
      env.features.at(i, j) = x1;
      env.features.at(i, dim + j) = x2;
      env.targets.at(i, j) = y;
    }
  }
  return env;
}

namespace {

void write_tensor(std::ofstream& out, const Tensor& t) {
  const std::uint64_t rank = t.rank();
  out.write(reinterpret_cast<const char*>(&rank), sizeof rank);
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::ifstream& in) {
  std::uint64_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), sizeof rank);
  if (!in || rank > 8) throw std::runtime_error("cache: corrupt tensor header");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    d = v;
  }
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw std::runtime_error("cache: truncated tensor data");
  return t;
}

}  // namespace

void write_cache(const std::filesystem::path& stem, const EnvironmentData& env) {
  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cache: cannot write " + stem.string() + ".bin");
  write_tensor(bin, env.features);
  write_tensor(bin, env.targets);
  nlohmann::json meta = {
      {"kind", env.meta.kind == EnvKind::Classification ? "classification" : "regression"},
      {"p_c", env.meta.p_c},
      {"label_flip", env.meta.label_flip},
      {"scheme", to_string(env.meta.scheme)},
      {"sigma_e", env.meta.sigma_e},
      {"sigma_1", env.meta.sigma_1},
      {"seed", env.meta.seed},
      {"test_only", env.test_only},
      {"n", env.size()},
  };
  std::ofstream(stem.string() + ".json") << meta.dump(2) << '\n';
}

EnvironmentData read_cache(const std::filesystem::path& stem) {
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  std::ifstream js(stem.string() + ".json");
  if (!bin || !js) throw std::runtime_error("cache: missing files for " + stem.string());
  EnvironmentData env;
  env.features = read_tensor(bin);
  env.targets = read_tensor(bin);
  const auto meta = nlohmann::json::parse(js);
  env.meta.kind = meta.at("kind") == "classification" ? EnvKind::Classification : EnvKind::Regression;
  env.meta.p_c = meta.at("p_c");
  env.meta.label_flip = meta.at("label_flip");
  env.meta.scheme = color_scheme_from_string(meta.at("scheme"));
  env.meta.sigma_e = meta.at("sigma_e");
  env.meta.sigma_1 = meta.at("sigma_1");
  env.meta.seed = meta.at("seed");
  env.test_only = meta.at("test_only");
  return env;
}

}  // namespace cirm::env
