#include "controlstyle/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace controlstyle::data {
namespace {

constexpr std::array<Rgb, 9> kPalette = {{
    {220, 40, 40},    // red
    {40, 180, 60},    // green
    {40, 70, 220},    // blue
    {235, 215, 40},   // yellow
    {140, 60, 180},   // purple
    {240, 140, 30},   // orange
    {245, 245, 245},  // white
    {20, 20, 20},     // black
    {128, 128, 128},  // default background
}};

constexpr int kSupersample = 4;

uint8_t quantize(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

int find_word(std::span<const std::string_view> words, std::string_view w) {
  const auto it = std::find(words.begin(), words.end(), w);
  return it == words.end() ? -1 : static_cast<int>(it - words.begin());
}

std::pair<int, int> relation_step(Relation r) {
  switch (r) {
    case Relation::Above: return {0, 1};
    case Relation::Below: return {0, -1};
    case Relation::LeftOf: return {1, 0};
    case Relation::RightOf: return {-1, 0};
  }
  return {0, 0};
}

std::vector<std::pair<int, int>> grid_positions(const SceneSpec& spec) {
  std::vector<std::pair<int, int>> pos{{0, 0}};
  for (auto r : spec.relations) {
    const auto [dx, dy] = relation_step(r);
    pos.emplace_back(pos.back().first + dx, pos.back().second + dy);
  }
  return pos;
}

void validate_scene(const SceneSpec& spec) {
  if (spec.shapes.empty() || spec.shapes.size() > kMaxShapes) {
    throw std::invalid_argument("scene must hold 1 to 3 shapes");
  }
  if (spec.relations.size() + 1 != spec.shapes.size()) throw std::invalid_argument("scene relation count mismatch");
  for (const auto& s : spec.shapes)
    if (s.color < 0 || s.color >= static_cast<int>(kColorNames.size())) throw std::invalid_argument("bad shape color");
  if (spec.background < 0 || spec.background > kGrayBackground) throw std::invalid_argument("bad background color");
  auto pos = grid_positions(spec);
  std::sort(pos.begin(), pos.end());
  if (std::adjacent_find(pos.begin(), pos.end()) != pos.end()) {
    throw std::invalid_argument("scene relations place two shapes on the same cell");
  }
}

bool inside(ShapeKind kind, double dx, double dy, double h) {
  switch (kind) {
    case ShapeKind::Circle: return dx * dx + dy * dy <= h * h;
    case ShapeKind::Square: return std::abs(dx) <= h && std::abs(dy) <= h;
    case ShapeKind::Triangle: {
      // apex (0,-h), base (-h,h) .. (h,h)
      if (dy > h) return false;
      const double half_width = (dy + h) * 0.5;
      return dy >= -h && std::abs(dx) <= half_width;
    }
  }
  return false;
}

void check_style(const StyleSpec& spec) {
  if (spec.palette.size() < 2 || spec.palette.size() > 4) throw std::invalid_argument("style palette needs 2-4 colors");
  if (spec.scale < 1) throw std::invalid_argument("style scale must be >= 1");
  const int f = static_cast<int>(spec.family);
  if (f < 0 || f >= static_cast<int>(kFamilyNames.size())) throw std::invalid_argument("invalid style family");
}

int positive_mod(int a, int n) { return ((a % n) + n) % n; }

int band_index(int coord, const StyleSpec& spec) {
  return positive_mod(static_cast<int>(std::floor(static_cast<double>(coord + spec.phase) / spec.scale)),
                      static_cast<int>(spec.palette.size()));
}

/// Smooth value-noise field, then ranks -> palette index in equal shares.
std::vector<int> noise_assignment(const StyleSpec& spec, int size) {
  const int lattice = size / spec.scale + 2;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> grid(static_cast<std::size_t>(lattice) * lattice);
  for (auto& g : grid) g = u(rng);
  auto smooth = [](double t) { return t * t * (3 - 2 * t); };
  const std::size_t n_px = static_cast<std::size_t>(size) * size;
  std::vector<double> field(n_px);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double fx = (x + 0.5) / spec.scale, fy = (y + 0.5) / spec.scale;
      const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
      const double tx = smooth(fx - ix), ty = smooth(fy - iy);
      auto at = [&](int gx, int gy) { return grid[static_cast<std::size_t>(gy) * lattice + gx]; };
      const double top = at(ix, iy) * (1 - tx) + at(ix + 1, iy) * tx;
      const double bot = at(ix, iy + 1) * (1 - tx) + at(ix + 1, iy + 1) * tx;
      field[static_cast<std::size_t>(y) * size + x] = top * (1 - ty) + bot * ty;
    }
  }
  std::vector<std::size_t> order(n_px);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return field[a] < field[b]; });
  const std::size_t n = spec.palette.size();
  std::vector<int> out(n_px);
  for (std::size_t rank = 0; rank < n_px; ++rank) out[order[rank]] = static_cast<int>(rank * n / n_px);
  return out;
}

std::array<double, 3> wash_color(const StyleSpec& spec, double u) {
  const int segments = static_cast<int>(spec.palette.size()) - 1;
  const double pos = u * segments;
  const int seg = std::min(static_cast<int>(pos), segments - 1);
  const double t = pos - seg;
  std::array<double, 3> c{};
  for (int k = 0; k < 3; ++k) c[k] = spec.palette[seg][k] * (1 - t) + spec.palette[seg + 1][k] * t;
  return c;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Rgb palette_color(int index) {
  if (index < 0 || index >= static_cast<int>(kPalette.size())) throw std::out_of_range("palette index");
  return kPalette[index];
}

std::vector<std::string> tokenize(std::string_view caption) {
  std::vector<std::string> out;
  std::istringstream ss{std::string(caption)};
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

std::string render_caption(const SceneSpec& spec) {
  validate_scene(spec);
  std::string out;
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    if (i > 0) out += " " + std::string(kRelationNames[static_cast<int>(spec.relations[i - 1])]) + " ";
    out += "a " + std::string(kColorNames[spec.shapes[i].color]) + " " +
           std::string(kShapeNames[static_cast<int>(spec.shapes[i].kind)]);
  }
  if (spec.background != kGrayBackground) out += " on " + std::string(kColorNames[spec.background]);
  return out;
}

SceneSpec parse_caption(std::string_view caption) {
  const auto tokens = tokenize(caption);
  std::size_t i = 0;
  auto fail = [&](const std::string& why) -> SceneSpec {
    throw std::invalid_argument("caption '" + std::string(caption) + "': " + why);
  };
  auto next = [&]() -> std::string_view { return i < tokens.size() ? std::string_view(tokens[i++]) : ""; };

  SceneSpec spec;
  auto read_object = [&] {
    if (next() != "a") fail("expected 'a'");
    const int color = find_word(kColorNames, next());
    if (color < 0) fail("unknown color");
    const int shape = find_word(kShapeNames, next());
    if (shape < 0) fail("unknown shape");
    spec.shapes.push_back({static_cast<ShapeKind>(shape), color});
  };

  read_object();
  while (i < tokens.size() && tokens[i] != "on") {
    auto word = std::string(next());
    if (word == "left" || word == "right") {
      if (next() != "of") fail("expected 'of'");
      word += " of";
    }
    const int rel = find_word(kRelationNames, word);
    if (rel < 0) fail("unknown relation '" + word + "'");
    spec.relations.push_back(static_cast<Relation>(rel));
    read_object();
  }
  if (i < tokens.size()) {
    ++i;  // "on"
    const int bg = find_word(kColorNames, next());
    if (bg < 0) fail("unknown background color");
    spec.background = bg;
  }
  if (i != tokens.size()) fail("trailing words");
  try {
    validate_scene(spec);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  return spec;
}

std::vector<ShapePlacement> layout(const SceneSpec& spec, int image_size) {
  validate_scene(spec);
  const auto pos = grid_positions(spec);
  int minx = 0, maxx = 0, miny = 0, maxy = 0;
  for (auto [x, y] : pos) {
    minx = std::min(minx, x), maxx = std::max(maxx, x);
    miny = std::min(miny, y), maxy = std::max(maxy, y);
  }
  const int extent = std::max(maxx - minx + 1, maxy - miny + 1);
  const double cell = (image_size - 8.0) / extent;
  const double mid_x = 0.5 * (minx + maxx), mid_y = 0.5 * (miny + maxy);
  std::vector<ShapePlacement> out;
  for (auto [x, y] : pos) {
    out.push_back({image_size / 2.0 + (x - mid_x) * cell, image_size / 2.0 + (y - mid_y) * cell, 0.36 * cell});
  }
  return out;
}

Image render_scene(const SceneSpec& spec, int image_size) {
  const auto places = layout(spec, image_size);
  const std::size_t n_px = static_cast<std::size_t>(image_size) * image_size;
  std::vector<std::array<double, 3>> canvas(n_px);
  const Rgb bg = kPalette[spec.background];
  std::fill(canvas.begin(), canvas.end(), std::array<double, 3>{bg.r / 255.0, bg.g / 255.0, bg.b / 255.0});

  for (std::size_t s = 0; s < spec.shapes.size(); ++s) {
    const auto& p = places[s];
    const Rgb col = kPalette[spec.shapes[s].color];
    const std::array<double, 3> c{col.r / 255.0, col.g / 255.0, col.b / 255.0};
    const int x0 = std::max(0, static_cast<int>(std::floor(p.cx - p.half_size - 1)));
    const int x1 = std::min(image_size - 1, static_cast<int>(std::ceil(p.cx + p.half_size + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(p.cy - p.half_size - 1)));
    const int y1 = std::min(image_size - 1, static_cast<int>(std::ceil(p.cy + p.half_size + 1)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSupersample; ++sy)
          for (int sx = 0; sx < kSupersample; ++sx) {
            const double px = x + (sx + 0.5) / kSupersample, py = y + (sy + 0.5) / kSupersample;
            hits += inside(spec.shapes[s].kind, px - p.cx, py - p.cy, p.half_size);
          }
        if (hits == 0) continue;
        const double cov = static_cast<double>(hits) / (kSupersample * kSupersample);
        auto& px = canvas[static_cast<std::size_t>(y) * image_size + x];
        for (int k = 0; k < 3; ++k) px[k] = px[k] * (1 - cov) + c[k] * cov;
      }
    }
  }
  Image img(image_size, image_size, 3);
  for (std::size_t i = 0; i < n_px; ++i)
    for (int k = 0; k < 3; ++k) img.pixels[i * 3 + k] = quantize(canvas[i][k]);
  return img;
}

Scene gen_scene(uint64_t seed, int image_size) {
  std::mt19937_64 rng(seed);
  auto pick = [&](int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); };
  SceneSpec spec;
  const int n_shapes = 1 + pick(kMaxShapes);
  for (int i = 0; i < n_shapes; ++i) {
    spec.shapes.push_back({static_cast<ShapeKind>(pick(3)), pick(static_cast<int>(kColorNames.size()))});
    if (i > 0) {
      Relation r;
      do {
        r = static_cast<Relation>(pick(4));
        spec.relations.push_back(r);
        const auto pos = grid_positions(spec);
        const bool clash = pos.size() >= 3 && pos[pos.size() - 1] == pos[pos.size() - 3];
        if (!clash) break;
        spec.relations.pop_back();
      } while (true);
    }
  }
  if (pick(2) == 1) {
    std::vector<int> free;
    for (int c = 0; c < static_cast<int>(kColorNames.size()); ++c) {
      const bool used = std::any_of(spec.shapes.begin(), spec.shapes.end(), [c](auto& s) { return s.color == c; });
      if (!used) free.push_back(c);
    }
    spec.background = free[pick(static_cast<int>(free.size()))];
  }
  return {render_scene(spec, image_size), render_caption(spec), spec};
}

// ---------------------------------------------------------------------------

std::string_view family_name(StyleFamily f) { return kFamilyNames.at(static_cast<int>(f)); }

StyleFamily parse_family(std::string_view name) {
  const int f = find_word(kFamilyNames, name);
  if (f < 0) throw std::invalid_argument("invalid style family '" + std::string(name) + "'");
  return static_cast<StyleFamily>(f);
}

Image gen_style(const StyleSpec& spec, int size) {
  check_style(spec);
  Image img(size, size, 3);
  auto put = [&](int x, int y, const std::array<double, 3>& c) {
    for (int k = 0; k < 3; ++k) img.at(y, x, k) = quantize(c[k]);
  };
  switch (spec.family) {
    case StyleFamily::Stripes:
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) put(x, y, spec.palette[band_index(spec.vertical ? x : y, spec)]);
      break;
    case StyleFamily::Checker: {
      const int n = static_cast<int>(spec.palette.size());
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const int a = static_cast<int>(std::floor(static_cast<double>(x + spec.phase) / spec.scale));
          const int b = static_cast<int>(std::floor(static_cast<double>(y + spec.phase) / spec.scale));
          put(x, y, spec.palette[positive_mod(a + b, n)]);
        }
      break;
    }
    case StyleFamily::ColoredNoise: {
      const auto assign = noise_assignment(spec, size);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) put(x, y, spec.palette[assign[static_cast<std::size_t>(y) * size + x]]);
      break;
    }
    case StyleFamily::GradientWash:
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) put(x, y, wash_color(spec, ((spec.vertical ? x : y) + 0.5) / size));
      break;
  }
  return img;
}

std::vector<double> palette_weights(const StyleSpec& spec, int size) {
  check_style(spec);
  const int n = static_cast<int>(spec.palette.size());
  std::vector<double> w(n, 0.0);
  const double px = static_cast<double>(size) * size;
  switch (spec.family) {
    case StyleFamily::Stripes:
      for (int c = 0; c < size; ++c) w[band_index(c, spec)] += 1.0 / size;
      break;
    case StyleFamily::Checker: {
      // Band counts along one axis; the checker color is (a + b) mod n.
      std::vector<double> band(n, 0.0);
      for (int c = 0; c < size; ++c) {
        const int a = static_cast<int>(std::floor(static_cast<double>(c + spec.phase) / spec.scale));
        band[positive_mod(a, n)] += 1.0;
      }
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) w[(a + b) % n] += band[a] * band[b] / px;
      break;
    }
    case StyleFamily::ColoredNoise:
      for (int k = 0; k < n; ++k) {
        const auto lo = static_cast<std::size_t>(std::ceil(k * px / n));
        const auto hi = static_cast<std::size_t>(std::ceil((k + 1) * px / n));
        w[k] = static_cast<double>(hi - lo) / px;
      }
      break;
    case StyleFamily::GradientWash:
      for (int k = 0; k < n; ++k) w[k] = (k == 0 || k == n - 1 ? 0.5 : 1.0) / (n - 1);
      break;
  }
  return w;
}

std::array<double, 3> analytic_mean(const StyleSpec& spec, int size) {
  const auto w = palette_weights(spec, size);
  std::array<double, 3> m{};
  for (std::size_t k = 0; k < w.size(); ++k)
    for (int c = 0; c < 3; ++c) m[c] += w[k] * spec.palette[k][c];
  return m;
}

std::array<double, 3> analytic_variance(const StyleSpec& spec, int size) {
  const auto m = analytic_mean(spec, size);
  std::array<double, 3> second{};
  if (spec.family == StyleFamily::GradientWash) {
    const int segments = static_cast<int>(spec.palette.size()) - 1;
    for (int s = 0; s < segments; ++s)
      for (int c = 0; c < 3; ++c) {
        const double a = spec.palette[s][c], b = spec.palette[s + 1][c];
        second[c] += (a * a + a * b + b * b) / 3.0 / segments;
      }
  } else {
    const auto w = palette_weights(spec, size);
    for (std::size_t k = 0; k < w.size(); ++k)
      for (int c = 0; c < 3; ++c) second[c] += w[k] * spec.palette[k][c] * spec.palette[k][c];
  }
  std::array<double, 3> v{};
  for (int c = 0; c < 3; ++c) v[c] = std::max(0.0, second[c] - m[c] * m[c]);
  return v;
}

std::string style_class_name(int style_class) {
  if (style_class < 0 || style_class >= kStyleClasses) throw std::out_of_range("style class");
  return std::string(kFamilyNames[style_class % 4]) + (style_class < 4 ? "-warm" : "-cool");
}

StyleSpec make_style_spec(int style_class, uint64_t seed) {
  if (style_class < 0 || style_class >= kStyleClasses) throw std::out_of_range("style class");
  static const std::vector<std::array<double, 3>> warm = {
      {0.85, 0.20, 0.15}, {0.95, 0.55, 0.10}, {0.95, 0.85, 0.30},
      {0.55, 0.25, 0.10}, {0.90, 0.45, 0.50}, {0.70, 0.10, 0.30}};
  static const std::vector<std::array<double, 3>> cool = {
      {0.10, 0.30, 0.80}, {0.15, 0.65, 0.60}, {0.35, 0.75, 0.35},
      {0.45, 0.25, 0.70}, {0.60, 0.80, 0.95}, {0.05, 0.15, 0.35}};
  std::mt19937_64 rng(seed);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  StyleSpec spec;
  spec.family = static_cast<StyleFamily>(style_class % 4);
  spec.seed = seed;
  auto pool = style_class < 4 ? warm : cool;
  std::shuffle(pool.begin(), pool.end(), rng);
  const int n = pick(2, 4);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (int k = 0; k < n; ++k) {
    auto c = pool[k];
    for (auto& v : c) v = std::clamp(v + jitter(rng), 0.0, 1.0);
    spec.palette.push_back(c);
  }
  static constexpr int kBand[] = {4, 6, 8, 12, 16};
  static constexpr int kNoise[] = {8, 16};
  switch (spec.family) {
    case StyleFamily::Stripes:
    case StyleFamily::Checker: spec.scale = kBand[pick(0, 4)]; break;
    case StyleFamily::ColoredNoise: spec.scale = kNoise[pick(0, 1)]; break;
    case StyleFamily::GradientWash: spec.scale = 1; break;
  }
  spec.vertical = pick(0, 1) == 1;
  spec.phase = pick(0, spec.scale - 1);
  return spec;
}

// ---------------------------------------------------------------------------

Image edge_map(const Image& image, double threshold) {
  const int w = image.width, h = image.height;
  std::vector<double> gray(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sum = 0;
      for (int c = 0; c < image.channels; ++c) sum += image.at(y, x, c);
      gray[static_cast<std::size_t>(y) * w + x] = sum / (255.0 * image.channels);
    }
  Image out(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double g = gray[static_cast<std::size_t>(y) * w + x];
      const double gx = x + 1 < w ? gray[static_cast<std::size_t>(y) * w + x + 1] - g : 0.0;
      const double gy = y + 1 < h ? gray[static_cast<std::size_t>(y + 1) * w + x] - g : 0.0;
      out.at(y, x, 0) = std::sqrt(gx * gx + gy * gy) > threshold ? 255 : 0;
    }
  return out;
}

// ---------------------------------------------------------------------------

uint64_t record_seed(uint64_t base_seed, uint64_t index) { return splitmix64(base_seed * 0x100000001b3ULL + index); }

void write_datasets(const std::filesystem::path& root, int n_scenes, int n_styles, uint64_t seed, int image_size) {
  namespace fs = std::filesystem;
  if (n_scenes <= 0 || n_styles <= 0) throw std::invalid_argument("dataset sizes must be positive");
  fs::create_directories(root / "scenes");
  fs::create_directories(root / "styles");
  char name[64];

  std::ofstream scenes(root / "scenes.jsonl", std::ios::trunc);
  for (int i = 0; i < n_scenes; ++i) {
    const uint64_t s = record_seed(seed, static_cast<uint64_t>(i));
    const auto scene = gen_scene(s, image_size);
    std::snprintf(name, sizeof name, "scenes/scene_%05d.png", i);
    write_png(root / name, scene.image);
    scenes << nlohmann::json{{"id", i}, {"seed", s}, {"caption", scene.caption}, {"path", name}}.dump() << '\n';
  }

  std::ofstream styles(root / "styles.jsonl", std::ios::trunc);
  for (int i = 0; i < n_styles; ++i) {
    const uint64_t s = record_seed(seed ^ 0x5354594cULL, static_cast<uint64_t>(i));
    const int cls = i % kStyleClasses;
    const auto spec = make_style_spec(cls, s);
    std::snprintf(name, sizeof name, "styles/style_%04d.png", i);
    write_png(root / name, gen_style(spec, image_size));
    styles << nlohmann::json{{"id", i},
                             {"seed", s},
                             {"class", cls},
                             {"class_name", style_class_name(cls)},
                             {"family", family_name(spec.family)},
                             {"palette", spec.palette},
                             {"scale", spec.scale},
                             {"vertical", spec.vertical},
                             {"phase", spec.phase},
                             {"path", name}}
                  .dump()
           << '\n';
  }
}

std::vector<SceneRecord> read_scene_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "scenes.jsonl");
  if (!in) throw std::runtime_error("missing scene manifest: " + (root / "scenes.jsonl").string());
  std::vector<SceneRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("id").get<int>(), j.at("seed").get<uint64_t>(), j.at("caption").get<std::string>(),
                   j.at("path").get<std::string>()});
  }
  return out;
}

std::vector<StyleRecord> read_style_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "styles.jsonl");
  if (!in) throw std::runtime_error("missing style manifest: " + (root / "styles.jsonl").string());
  std::vector<StyleRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StyleRecord r;
    r.id = j.at("id").get<int>();
    r.seed = j.at("seed").get<uint64_t>();
    r.style_class = j.at("class").get<int>();
    r.spec.family = parse_family(j.at("family").get<std::string>());
    r.spec.palette = j.at("palette").get<std::vector<std::array<double, 3>>>();
    r.spec.scale = j.at("scale").get<int>();
    r.spec.vertical = j.at("vertical").get<bool>();
    r.spec.phase = j.at("phase").get<int>();
    r.spec.seed = r.seed;
    r.path = j.at("path").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace controlstyle::data
