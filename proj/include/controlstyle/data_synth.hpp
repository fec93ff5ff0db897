#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "controlstyle/image.hpp"

namespace controlstyle::data {

// ---------------------------------------------------------------------------
// Caption grammar
//
//   caption  := object { relation object } [ "on" COLOR ]      (1 to 3 objects)
//   object   := "a" COLOR SHAPE
//   relation := "above" | "below" | "left" "of" | "right" "of"
//
// "A r B" places B next to A so that A is r of B. A relation may not undo the
// previous one (that would stack two shapes on the same cell). Without the
// "on COLOR" suffix the background is neutral gray.
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 8> kColorNames = {"red",    "green",  "blue",  "yellow",
                                                                 "purple", "orange", "white", "black"};
inline constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 4> kRelationNames = {"above", "below", "left of", "right of"};
inline constexpr int kMaxShapes = 3;
/// Longest caption: 3 objects, 2 two-word relations, background suffix.
inline constexpr int kMaxCaptionTokens = 15;

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Palette index -> 8-bit color. Index 8 is the implicit gray background.
Rgb palette_color(int index);
inline constexpr int kGrayBackground = 8;

enum class ShapeKind { Circle, Square, Triangle };
enum class Relation { Above, Below, LeftOf, RightOf };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Circle;
  int color = 0;
  bool operator==(const ShapeSpec&) const = default;
};

struct SceneSpec {
  std::vector<ShapeSpec> shapes;      // 1..3
  std::vector<Relation> relations;    // shapes.size() - 1
  int background = kGrayBackground;   // palette index, or kGrayBackground
  bool operator==(const SceneSpec&) const = default;
};

/// Where a shape lands in the rendered image (pixel units).
struct ShapePlacement {
  double cx = 0, cy = 0, half_size = 0;
};

std::string render_caption(const SceneSpec& spec);
/// Throws std::invalid_argument on anything outside the grammar.
SceneSpec parse_caption(std::string_view caption);
std::vector<std::string> tokenize(std::string_view caption);

std::vector<ShapePlacement> layout(const SceneSpec& spec, int image_size);
Image render_scene(const SceneSpec& spec, int image_size);

struct Scene {
  Image image;
  std::string caption;
  SceneSpec spec;
};

/// Deterministic under seed.
Scene gen_scene(uint64_t seed, int image_size = 64);

// ---------------------------------------------------------------------------
// Style textures
// ---------------------------------------------------------------------------

enum class StyleFamily { Stripes, Checker, ColoredNoise, GradientWash };
inline constexpr std::array<std::string_view, 4> kFamilyNames = {"stripes", "checker", "colored-noise",
                                                                 "gradient-wash"};

std::string_view family_name(StyleFamily f);
/// Throws std::invalid_argument for unknown names.
StyleFamily parse_family(std::string_view name);

struct StyleSpec {
  StyleFamily family = StyleFamily::Stripes;
  std::vector<std::array<double, 3>> palette;  // 2..4 colors, components in [0, 1]
  int scale = 8;                               // band width, cell size or noise lattice spacing (pixels)
  bool vertical = false;                       // stripe / wash direction
  int phase = 0;                               // pixel offset of the pattern
  uint64_t seed = 0;                           // noise lattice
};

/// Throws std::invalid_argument on an invalid palette size or scale.
Image gen_style(const StyleSpec& spec, int image_size = 64);

/// Fraction of the image covered by each palette color, computed from the
/// pattern geometry (equal shares for noise, trapezoid weights for washes).
std::vector<double> palette_weights(const StyleSpec& spec, int image_size = 64);
/// Per-channel pixel mean / variance implied by the spec, on the [0, 1] scale.
std::array<double, 3> analytic_mean(const StyleSpec& spec, int image_size = 64);
std::array<double, 3> analytic_variance(const StyleSpec& spec, int image_size = 64);

/// Style classes: the four families crossed with a warm and a cool theme.
inline constexpr int kStyleClasses = 8;
std::string style_class_name(int style_class);
StyleSpec make_style_spec(int style_class, uint64_t seed);

// ---------------------------------------------------------------------------
// Edge maps
// ---------------------------------------------------------------------------

/// Binary (0/255) single-channel gradient-magnitude edge map using forward
/// differences of the channel-mean luminance. `threshold` is on the [0, 1] scale.
Image edge_map(const Image& image, double threshold = 0.08);

// ---------------------------------------------------------------------------
// Dataset manifests (line-delimited JSON)
// ---------------------------------------------------------------------------

struct SceneRecord {
  int id = 0;
  uint64_t seed = 0;
  std::string caption;
  std::string path;  // relative to the dataset root
};

struct StyleRecord {
  int id = 0;
  uint64_t seed = 0;
  int style_class = 0;
  StyleSpec spec;
  std::string path;
};

uint64_t record_seed(uint64_t base_seed, uint64_t index);

/// Writes scenes/*.png, styles/*.png, scenes.jsonl and styles.jsonl under root.
void write_datasets(const std::filesystem::path& root, int n_scenes, int n_styles, uint64_t seed, int image_size);
std::vector<SceneRecord> read_scene_manifest(const std::filesystem::path& root);
std::vector<StyleRecord> read_style_manifest(const std::filesystem::path& root);

}  // namespace controlstyle::data
