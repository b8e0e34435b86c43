#include "mkd/data_synth.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

#include "mkd/errors.hpp"
#include "mkd/random.hpp"

namespace mkd {

namespace fs = std::filesystem;

double standard_normal(Rng& rng) {
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string serialize_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng deserialize_rng(const std::string& text) {
  std::istringstream is(text);
  Rng rng;
  is >> rng;
  if (!is) throw LoadError("corrupt random generator state");
  return rng;
}

std::string to_string(ModalityStyle s) { return s == ModalityStyle::A ? "A" : "B"; }
std::string to_string(Modality m) { return m == Modality::assistant ? "assistant" : "target"; }

ModalityStyle parse_style(const std::string& s) {
  if (s == "A" || s == "a") return ModalityStyle::A;
  if (s == "B" || s == "b") return ModalityStyle::B;
  throw ConfigError("unknown modality style '" + s + "' (expected A or B)");
}

Modality parse_modality(const std::string& s) {
  if (s == "assistant") return Modality::assistant;
  if (s == "target") return Modality::target;
  throw ConfigError("unknown modality '" + s + "' (expected assistant or target)");
}

void PhantomSpec::validate() const {
  if (num_classes < 2) throw ConfigError("phantom spec: num_classes must be >= 2");
  if (num_classes > 255) throw ConfigError("phantom spec: num_classes must be <= 255");
  if (image_size < 16) throw ConfigError("phantom spec: image_size must be >= 16");
  if (intensity_map.size() != static_cast<std::size_t>(num_classes)) {
    throw ConfigError("phantom spec: intensity_map needs one entry per class");
  }
  for (double v : intensity_map) {
    if (!(v >= -1.0 && v <= 1.0)) throw ConfigError("phantom spec: intensities must lie in [-1, 1]");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("phantom spec: noise_sigma must be >= 0");
  if (!(bias_strength >= 0.0 && bias_strength < 1.0)) {
    throw ConfigError("phantom spec: bias_strength must lie in [0, 1)");
  }
}

PhantomSpec default_phantom_spec(ModalityStyle style, int image_size, int num_classes,
                                 std::uint64_t geometry_seed) {
  PhantomSpec spec;
  spec.image_size = image_size;
  spec.num_classes = num_classes;
  spec.geometry_seed = geometry_seed;
  spec.modality_style = style;
  const int fg = std::max(1, num_classes - 1);
  spec.intensity_map.assign(static_cast<std::size_t>(std::max(num_classes, 0)), 0.0);
  if (num_classes < 1) return spec;
  if (style == ModalityStyle::A) {
    // High soft-tissue contrast, strong bias field, little noise.
    if (num_classes == 4) {
      spec.intensity_map = {-0.8, 0.2, 0.8, -0.3};
    } else {
      spec.intensity_map[0] = -0.8;
      for (int k = 1; k < num_classes; ++k) {
        spec.intensity_map[static_cast<std::size_t>(k)] =
            -0.4 + 1.2 * static_cast<double>((k * 3) % fg) / std::max(1, fg - 1);
      }
    }
    spec.noise_sigma = 0.06;
    spec.bias_strength = 0.3;
  } else {
    // Low contrast between foreground structures, heavier noise.
    if (num_classes == 4) {
      spec.intensity_map = {-0.5, 0.6, 0.2, 0.35};
    } else {
      spec.intensity_map[0] = -0.5;
      for (int k = 1; k < num_classes; ++k) {
        spec.intensity_map[static_cast<std::size_t>(k)] =
            0.1 + 0.6 * static_cast<double>(k - 1) / std::max(1, fg - 1);
      }
    }
    spec.noise_sigma = 0.18;
    spec.bias_strength = 0.05;
  }
  for (double& v : spec.intensity_map) v = std::clamp(v, -1.0, 1.0);
  return spec;
}

void Dataset::validate() const {
  if (num_classes < 2) throw InputError("dataset: num_classes must be >= 2");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const LabeledSample& s = samples[i];
    if (s.modality != modality) throw InputError("dataset: sample " + std::to_string(i) + " has wrong modality");
    require_chw(s.image, "dataset sample");
    if (s.image.channels() != 1 || s.image.height() != s.label.height() ||
        s.image.width() != s.label.width()) {
      throw InputError("dataset: sample " + std::to_string(i) + " image/label shape mismatch");
    }
    if (s.image.shape() != samples.front().image.shape()) {
      throw InputError("dataset: sample " + std::to_string(i) + " differs in shape");
    }
    for (std::uint8_t v : s.label.values()) {
      if (v >= num_classes) throw InputError("dataset: sample " + std::to_string(i) + " label out of range");
    }
  }
}

namespace {

struct Blob {
  double cx, cy;      // centre
  double a, b;        // semi-axes
  double angle;       // rotation
  double m2, p2;      // 2nd harmonic boundary modulation
  double m3, p3;      // 3rd harmonic
  std::uint8_t label;
};

struct Warp {
  double ax, fx, px;
  double ay, fy, py;
};

bool inside(const Blob& bl, double x, double y) {
  const double dx = x - bl.cx;
  const double dy = y - bl.cy;
  const double c = std::cos(bl.angle);
  const double s = std::sin(bl.angle);
  const double u = (c * dx + s * dy) / bl.a;
  const double v = (-s * dx + c * dy) / bl.b;
  const double rho = std::sqrt(u * u + v * v);
  const double phi = std::atan2(v, u);
  const double boundary = 1.0 + bl.m2 * std::cos(2.0 * phi + bl.p2) + bl.m3 * std::cos(3.0 * phi + bl.p3);
  return rho < boundary;
}

LabelMap synthesize_geometry(const PhantomSpec& spec, std::uint64_t sample_seed) {
  Rng rng(derive_seed(derive_seed(spec.geometry_seed, "phantom-geometry"), sample_seed));
  const double size = spec.image_size;
  const double two_pi = 2.0 * std::numbers::pi;

  Warp warp{uniform(rng, 0.01, 0.03) * size, uniform(rng, 0.5, 1.5), uniform(rng, 0.0, two_pi),
            uniform(rng, 0.01, 0.03) * size, uniform(rng, 0.5, 1.5), uniform(rng, 0.0, two_pi)};

  const int foreground = spec.num_classes - 1;
  const int blob_count = std::max(3, foreground);
  std::vector<Blob> blobs;
  blobs.reserve(static_cast<std::size_t>(blob_count));

  Blob outer{};
  outer.cx = size * (0.5 + uniform(rng, -0.06, 0.06));
  outer.cy = size * (0.5 + uniform(rng, -0.06, 0.06));
  outer.a = size * uniform(rng, 0.26, 0.34);
  outer.b = size * uniform(rng, 0.22, 0.30);
  outer.angle = uniform(rng, 0.0, std::numbers::pi);
  outer.m2 = uniform(rng, 0.0, 0.08);
  outer.p2 = uniform(rng, 0.0, two_pi);
  outer.m3 = uniform(rng, 0.0, 0.05);
  outer.p3 = uniform(rng, 0.0, two_pi);
  outer.label = 1;
  blobs.push_back(outer);

  const double base_angle = uniform(rng, 0.0, two_pi);
  for (int i = 1; i < blob_count; ++i) {
    Blob bl{};
    const double alpha = base_angle + two_pi * (i - 1) / (blob_count - 1) + uniform(rng, -0.4, 0.4);
    const double r = size * uniform(rng, 0.06, 0.14);
    bl.cx = outer.cx + r * std::cos(alpha);
    bl.cy = outer.cy + r * std::sin(alpha);
    bl.a = size * uniform(rng, 0.09, 0.15);
    bl.b = size * uniform(rng, 0.07, 0.12);
    bl.angle = uniform(rng, 0.0, std::numbers::pi);
    bl.m2 = uniform(rng, 0.0, 0.12);
    bl.p2 = uniform(rng, 0.0, two_pi);
    bl.m3 = uniform(rng, 0.0, 0.08);
    bl.p3 = uniform(rng, 0.0, two_pi);
    bl.label = static_cast<std::uint8_t>(1 + (i % foreground));
    blobs.push_back(bl);
  }

  LabelMap label(spec.image_size, spec.image_size, 0);
  for (int y = 0; y < spec.image_size; ++y) {
    for (int x = 0; x < spec.image_size; ++x) {
      const double px = x + 0.5 + warp.ax * std::sin(two_pi * warp.fx * y / size + warp.px);
      const double py = y + 0.5 + warp.ay * std::sin(two_pi * warp.fy * x / size + warp.py);
      std::uint8_t v = 0;
      for (const Blob& bl : blobs) {
        if (inside(bl, px, py)) v = bl.label;
      }
      label.at(y, x) = v;
    }
  }
  return label;
}

}  // namespace

LabeledSample synthesize_sample(const PhantomSpec& spec, std::uint64_t sample_seed, Modality modality) {
  spec.validate();
  LabeledSample out;
  out.modality = modality;
  out.label = synthesize_geometry(spec, sample_seed);

  const int n = spec.image_size;
  const double size = n;
  const double two_pi = 2.0 * std::numbers::pi;
  Rng rng(derive_seed(derive_seed(derive_seed(spec.geometry_seed, "phantom-appearance"), sample_seed),
                      static_cast<std::uint64_t>(spec.modality_style)));

  // Piecewise-constant intensities, softened by a 3x3 box filter.
  std::vector<double> base(static_cast<std::size_t>(n * n));
  for (int i = 0; i < n * n; ++i) base[static_cast<std::size_t>(i)] = spec.intensity_map[out.label[static_cast<std::size_t>(i)]];
  std::vector<double> smooth(base.size());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double sum = 0.0;
      int cnt = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy;
          const int xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= n || xx >= n) continue;
          sum += base[static_cast<std::size_t>(yy * n + xx)];
          ++cnt;
        }
      }
      smooth[static_cast<std::size_t>(y * n + x)] = sum / cnt;
    }
  }

  const double bx = uniform(rng, 0.5, 1.0);
  const double by = uniform(rng, 0.5, 1.0);
  const double bp = uniform(rng, 0.0, two_pi);
  out.image = Image({1, n, n});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double field = std::sin(two_pi * (bx * x + by * y) / (2.0 * size) + bp);
      double v = (smooth[static_cast<std::size_t>(y * n + x)] + 1.0) * (1.0 + spec.bias_strength * field) - 1.0;
      v += spec.noise_sigma * standard_normal(rng);
      v = std::clamp(v, -1.0, 1.0);
      out.image.at(0, y, x) = static_cast<double>(static_cast<float>(v));
    }
  }
  return out;
}

Dataset synthesize_dataset(const PhantomSpec& spec, int count, std::uint64_t first_seed, Modality modality) {
  if (count < 0) throw ConfigError("dataset count must be >= 0");
  Dataset d;
  d.modality = modality;
  d.num_classes = spec.num_classes;
  d.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) d.samples.push_back(synthesize_sample(spec, first_seed + static_cast<std::uint64_t>(i), modality));
  return d;
}

Augmentation choose_augmentation(std::uint64_t rng_seed) {
  return static_cast<Augmentation>(splitmix64(rng_seed) % 6);
}

LabeledSample apply_augmentation(const LabeledSample& s, Augmentation a) {
  if (a == Augmentation::identity) return s;
  const int h = s.label.height();
  const int w = s.label.width();
  const bool swaps = a == Augmentation::rotate90 || a == Augmentation::rotate270;
  if (swaps && h != w) throw InputError("augment: 90-degree rotations need square samples");
  LabeledSample out;
  out.modality = s.modality;
  out.image = Image({1, h, w});
  out.label = LabelMap(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int sy = y;
      int sx = x;
      switch (a) {
        case Augmentation::flip_horizontal: sx = w - 1 - x; break;
        case Augmentation::flip_vertical: sy = h - 1 - y; break;
        case Augmentation::rotate90: sy = x; sx = w - 1 - y; break;
        case Augmentation::rotate180: sy = h - 1 - y; sx = w - 1 - x; break;
        case Augmentation::rotate270: sy = h - 1 - x; sx = y; break;
        case Augmentation::identity: break;
      }
      out.image.at(0, y, x) = s.image.at(0, sy, sx);
      out.label.at(y, x) = s.label.at(sy, sx);
    }
  }
  return out;
}

LabeledSample augment_sample(const LabeledSample& s, std::uint64_t rng_seed) {
  return apply_augmentation(s, choose_augmentation(rng_seed));
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

constexpr std::array<char, 4> kMagic = {'P', 'X', 'M', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 32;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

void write_sample_file(const LabeledSample& s, int num_classes, const fs::path& file) {
  const int h = s.label.height();
  const int w = s.label.width();
  std::string buf;
  buf.reserve(kHeaderBytes + static_cast<std::size_t>(h * w) * 5);
  buf.append(kMagic.data(), kMagic.size());
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(h));
  put_u32(buf, static_cast<std::uint32_t>(w));
  put_u32(buf, static_cast<std::uint32_t>(num_classes));
  put_u32(buf, s.modality == Modality::assistant ? 0U : 1U);
  put_u32(buf, 0);
  put_u32(buf, 0);
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(s.image[i])));
  }
  for (std::uint8_t v : s.label.values()) buf.push_back(static_cast<char>(v));
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + file.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("write failed for " + file.string());
}

LabeledSample read_sample_file(const fs::path& file, int expected_classes, Modality modality) {
  const std::string buf = read_file(file);
  const std::string name = file.string();
  if (buf.size() < kHeaderBytes) throw FormatError(name + ": truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (std::memcmp(p, kMagic.data(), kMagic.size()) != 0) throw FormatError(name + ": bad magic");
  if (get_u32(p + 4) != kVersion) throw FormatError(name + ": unsupported version " + std::to_string(get_u32(p + 4)));
  const std::uint32_t h = get_u32(p + 8);
  const std::uint32_t w = get_u32(p + 12);
  const std::uint32_t classes = get_u32(p + 16);
  const std::uint32_t mod = get_u32(p + 20);
  if (h == 0 || w == 0 || h > 65536 || w > 65536) throw FormatError(name + ": bad image dimensions");
  if (static_cast<int>(classes) != expected_classes) {
    throw FormatError(name + ": num_classes " + std::to_string(classes) + " does not match manifest (" +
                      std::to_string(expected_classes) + ")");
  }
  if (mod != (modality == Modality::assistant ? 0U : 1U)) throw FormatError(name + ": modality does not match manifest");
  const std::size_t pixels = static_cast<std::size_t>(h) * w;
  if (buf.size() != kHeaderBytes + pixels * 5) throw FormatError(name + ": payload size mismatch");

  LabeledSample s;
  s.modality = modality;
  s.image = Image({1, static_cast<int>(h), static_cast<int>(w)});
  const unsigned char* img = p + kHeaderBytes;
  for (std::size_t i = 0; i < pixels; ++i) {
    s.image[i] = static_cast<double>(std::bit_cast<float>(get_u32(img + 4 * i)));
  }
  std::vector<std::uint8_t> labels(img + 4 * pixels, img + 5 * pixels);
  for (std::uint8_t v : labels) {
    if (v >= classes) throw FormatError(name + ": label " + std::to_string(v) + " >= num_classes");
  }
  s.label = LabelMap(static_cast<int>(h), static_cast<int>(w), std::move(labels));
  return s;
}

namespace {

std::string sample_filename(std::size_t index) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << index << ".pxm";
  return os.str();
}

}  // namespace

void write_dataset(const Dataset& d, const fs::path& dir) {
  d.validate();
  fs::create_directories(dir);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    write_sample_file(d.samples[i], d.num_classes, dir / sample_filename(i));
  }
  std::ofstream meta(dir / "meta.txt", std::ios::trunc);
  if (!meta) throw FormatError("cannot write " + (dir / "meta.txt").string());
  meta << "format=pxm1\n"
       << "modality=" << to_string(d.modality) << '\n'
       << "num_classes=" << d.num_classes << '\n'
       << "image_size=" << d.image_size() << '\n'
       << "count=" << d.samples.size() << '\n';
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.txt";
  std::ifstream meta(meta_path);
  if (!meta) throw FormatError("missing manifest " + meta_path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(meta_path.string() + ": malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {"modality", "num_classes", "image_size", "count"}) {
    if (!kv.count(key)) throw FormatError(meta_path.string() + ": missing key " + key);
  }
  Dataset d;
  int image_size = 0;
  long count = 0;
  try {
    d.modality = parse_modality(kv["modality"]);
    d.num_classes = std::stoi(kv["num_classes"]);
    image_size = std::stoi(kv["image_size"]);
    count = std::stol(kv["count"]);
  } catch (const std::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (d.num_classes < 2 || count < 0) throw FormatError(meta_path.string() + ": invalid metadata");
  for (long i = 0; i < count; ++i) {
    const fs::path file = dir / sample_filename(static_cast<std::size_t>(i));
    if (!fs::exists(file)) throw FormatError("missing sample file " + file.string());
    LabeledSample s = read_sample_file(file, d.num_classes, d.modality);
    if (s.label.height() != image_size || s.label.width() != image_size) {
      throw FormatError(file.string() + ": shape does not match manifest image_size " + std::to_string(image_size));
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace mkd
