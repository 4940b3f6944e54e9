#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm::env {

class IdxError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Contents of one IDX file: either unsigned-byte images or labels.
struct IdxFile {
  bool is_images = false;
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bytes;
};

IdxFile read_idx(const std::filesystem::path& path);
IdxFile parse_idx(const std::vector<std::uint8_t>& raw);

/// Grayscale images flattened to [n x rows*cols] in [0, 1] with integer class labels.
struct BaseImages {
  Tensor images;
  std::vector<int> labels;
  std::size_t rows = 28;
  std::size_t cols = 28;

  std::size_t size() const { return labels.size(); }
};

/// Loads a matching pair of image and label files.
BaseImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Ten-class 28x28 striped and blob patterns, class i % 10 for sample i.
BaseImages synthetic_pattern_fallback(std::size_t n, std::uint64_t seed);

enum class ColorScheme { B01, B11 };
enum class BinarizeRule { Parity, EmnistLetters };
enum class EnvKind { Classification, Regression };

std::string to_string(ColorScheme s);
ColorScheme color_scheme_from_string(const std::string& s);
std::string to_string(BinarizeRule r);
BinarizeRule binarize_rule_from_string(const std::string& s);

/// Preliminary binary label before noise.
int binarize(int label, BinarizeRule rule);

/// Pixels below this intensity count as background.
inline constexpr double kBackgroundThreshold = 0.1;

struct EnvMeta {
  EnvKind kind = EnvKind::Classification;
  double p_c = 0.0;
  double label_flip = 0.0;
  ColorScheme scheme = ColorScheme::B01;
  double sigma_e = 0.0;
  double sigma_1 = 0.0;
  std::uint64_t seed = 0;
};

class IsolationError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Access token shared by every copy of a leased environment.
struct DataLease {
  std::atomic<bool> active{true};
};

/// One environment. Targets hold labels as 0/1 values [n] for classification
/// and a [n x k] matrix for regression.
struct EnvironmentData {
  Tensor features;
  Tensor targets;
  EnvMeta meta;
  bool test_only = false;
  std::vector<int> clean_labels;  // before label noise
  std::vector<int> colors;        // z
  std::shared_ptr<DataLease> lease;  // set by the continual harness

  /// Throws IsolationError once the lease has been revoked.
  void require_access() const;
  std::size_t size() const { return features.rank() == 0 ? 0 : features.shape()[0]; }
  std::vector<int> labels() const;
};

/// Samples n base images without replacement, derives noisy labels and the
/// color variable z, and renders a (red, green) image: foreground colored for
/// b01, background colored for b11. z = 0 is green, z = 1 is red.
EnvironmentData make_colored_env(const BaseImages& base, double label_flip, double p_c, ColorScheme scheme,
                                 BinarizeRule rule, std::size_t n, std::uint64_t seed);

/// Color probabilities per environment: {0.2, 0.1} for two environments,
/// otherwise evenly spaced over [0.1, 0.2] (0.15 for one).
std::vector<double> default_p_c_schedule(std::size_t n_envs);
inline constexpr double kTestPc = 0.9;
inline constexpr double kLabelFlip = 0.25;

/// x1 ~ N(0, sigma_1^2), y = x1 + N(0, sigma_e^2), x2 = y + N(0, 1), blocks of `dim`.
/// Features are (x1, x2), targets y.
EnvironmentData synth_sem(std::size_t n, double sigma_e, double sigma_1, std::uint64_t seed, std::size_t dim = 4);

/// Binary cache: features and targets plus a JSON sidecar with the metadata.
void write_cache(const std::filesystem::path& stem, const EnvironmentData& env);
EnvironmentData read_cache(const std::filesystem::path& stem);

}  // namespace cirm::env
