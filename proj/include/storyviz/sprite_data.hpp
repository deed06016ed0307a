#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "storyviz/png_io.hpp"

namespace storyviz {

enum class Shape { circle, square, triangle, star, diamond, cross, ring };
enum class Pronoun { he, she };

struct CharacterSpec {
    std::string name;
    Shape shape;
    std::array<uint8_t, 3> color;
    Pronoun pronoun;
};

struct BackgroundSpec {
    std::string label;
    std::array<uint8_t, 3> color;
};

struct DatasetConfig {
    int n_frames = 4;
    int image_size = 32;
    double subset_prob = 0.6;  // chance frame i's cast is drawn as a subset of frame i-1's
    std::vector<CharacterSpec> roster;
    std::vector<BackgroundSpec> backgrounds;
    std::vector<std::string> actions;

    static DatasetConfig defaults();
};

// One character placed in a scene. Cell indexes the 3x3 position grid
// row-major; action indexes DatasetConfig::actions (scenes generated from the
// caption template share one action across characters).
struct ScenePlacement {
    int roster_index = 0;
    int cell = 0;
    int action = 0;
};

struct SceneSpec {
    std::vector<ScenePlacement> chars;
    int background = 0;
    int image_size = 32;
};

struct CharAnnotation {
    std::string name;
    int token_index = 0;  // position of the name token in the bos-prefixed original caption
    std::vector<uint8_t> mask;  // image_size*image_size, row-major, 0/1
    Image8 crop;

    bool operator==(const CharAnnotation& o) const {
        return name == o.name && token_index == o.token_index && mask == o.mask && crop == o.crop;
    }
};

struct StoryEpisode {
    std::vector<Image8> frames;
    std::vector<std::string> captions_original;
    std::vector<std::string> captions_referential;
    std::vector<std::vector<CharAnnotation>> annotations;
    std::vector<int> backgrounds;

    bool operator==(const StoryEpisode& o) const {
        return frames == o.frames && captions_original == o.captions_original &&
               captions_referential == o.captions_referential && annotations == o.annotations &&
               backgrounds == o.backgrounds;
    }
};

// Shape rasterization: integer offsets relative to the sprite center for a
// box of odd side b (radius r = b/2). Deterministic, no anti-aliasing.
std::vector<std::pair<int, int>> shape_offsets(Shape shape, int radius);

const char* shape_name(Shape s);
Shape shape_from_name(const std::string& s);
const char* pronoun_word(Pronoun p);
Pronoun pronoun_from_word(const std::string& s);

// Renders the scene; masks[i] is the exact sprite occupancy of chars[i].
void render_frame(const SceneSpec& scene, const DatasetConfig& config, Image8& image,
                  std::vector<std::vector<uint8_t>>& masks);

std::string build_caption(const std::vector<std::string>& names, const std::string& action,
                          const std::string& background);

// The referential rewriting pass over an episode's captions. char_sets[i]
// holds the names present in frame i in caption order. Frame 1 is never
// rewritten; frame i>1 is rewritten when its cast is a subset of frame
// i-1's ORIGINAL cast.
std::vector<std::string> extend_referential(const std::vector<std::string>& captions,
                                            const std::vector<std::vector<std::string>>& char_sets,
                                            const std::vector<CharacterSpec>& roster);

StoryEpisode generate_episode(uint64_t seed, const DatasetConfig& config);

// Mask helpers shared with training and eval.
struct BBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
    bool empty() const { return x1 <= x0 || y1 <= y0; }
};
BBox mask_bbox(const std::vector<uint8_t>& mask, int w, int h);
Image8 crop_from_mask(const Image8& frame, const std::vector<uint8_t>& mask);
// Area-average then re-binarize at 0.5. Source is w x h, target tw x th.
std::vector<uint8_t> downsample_mask(const std::vector<uint8_t>& mask, int w, int h, int tw,
                                     int th);
std::vector<int> mask_to_rle(const std::vector<uint8_t>& mask);
std::vector<uint8_t> rle_to_mask(const std::vector<int>& rle, size_t expected_size);

std::string serialize_dataset(const std::vector<StoryEpisode>& episodes, const std::string& dir,
                              const DatasetConfig& config);
std::vector<StoryEpisode> load_dataset(const std::string& dir, DatasetConfig* out_config = nullptr);

}  // namespace storyviz
