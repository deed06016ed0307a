#include "storyviz/sprite_data.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "storyviz/errors.hpp"
#include "storyviz/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace storyviz {

DatasetConfig DatasetConfig::defaults() {
    DatasetConfig c;
    c.roster = {
        {"Fred", Shape::square, {255, 128, 0}, Pronoun::he},
        {"Wilma", Shape::circle, {255, 255, 255}, Pronoun::she},
        {"Barney", Shape::triangle, {160, 80, 0}, Pronoun::he},
        {"Betty", Shape::star, {0, 0, 255}, Pronoun::she},
        {"Pebbles", Shape::diamond, {255, 0, 255}, Pronoun::she},
        {"Dino", Shape::cross, {0, 255, 0}, Pronoun::he},
        {"Slate", Shape::ring, {0, 255, 255}, Pronoun::he},
    };
    c.backgrounds = {
        {"kitchen", {64, 64, 64}},   {"bedroom", {0, 0, 96}},  {"garden", {0, 96, 0}},
        {"street", {96, 0, 0}},      {"beach", {192, 160, 96}}, {"cave", {96, 0, 96}},
        {"school", {160, 160, 0}},   {"park", {0, 160, 160}},
    };
    c.actions = {"waving", "jumping", "cooking", "reading", "dancing", "sleeping"};
    return c;
}

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
        case Shape::star: return "star";
        case Shape::diamond: return "diamond";
        case Shape::cross: return "cross";
        case Shape::ring: return "ring";
    }
    return "?";
}

Shape shape_from_name(const std::string& s) {
    for (int i = 0; i <= int(Shape::ring); ++i)
        if (s == shape_name(Shape(i))) return Shape(i);
    throw DataError("unknown shape name: " + s);
}

const char* pronoun_word(Pronoun p) { return p == Pronoun::he ? "he" : "she"; }

Pronoun pronoun_from_word(const std::string& s) {
    if (s == "he") return Pronoun::he;
    if (s == "she") return Pronoun::she;
    throw DataError("unknown pronoun: " + s);
}

std::vector<std::pair<int, int>> shape_offsets(Shape shape, int r) {
    std::vector<std::pair<int, int>> px;
    const auto emit = [&](int dx, int dy) { px.emplace_back(dx, dy); };
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int d2 = dx * dx + dy * dy;
            bool on = false;
            switch (shape) {
                case Shape::circle:
                    on = 4 * d2 <= 3 * r * r;
                    break;
                case Shape::square:
                    on = 4 * std::abs(dx) <= 3 * r && 4 * std::abs(dy) <= 3 * r;
                    break;
                case Shape::triangle:
                    // rows -(r-1)..(r-1), widening downward
                    on = dy >= -(r - 1) && dy <= r - 1 && std::abs(dx) <= (dy + r - 1) / 2;
                    break;
                case Shape::star:
                    on = std::abs(dx * dy) <= r / 2;
                    break;
                case Shape::diamond:
                    on = std::abs(dx) + std::abs(dy) <= r - 1;
                    break;
                case Shape::cross:
                    on = std::abs(dx) <= r / 4 || std::abs(dy) <= r / 4;
                    break;
                case Shape::ring:
                    on = d2 >= std::max(1, r * r / 4) && d2 <= r * r - 2;
                    break;
            }
            if (on) emit(dx, dy);
        }
    return px;
}

namespace {

struct Grid {
    int cell = 0;
    int offset = 0;
    int radius = 0;
};

Grid grid_for(int image_size) {
    Grid g;
    g.cell = image_size / 3;
    g.offset = (image_size - 3 * g.cell) / 2;
    const int box = g.cell - (g.cell + 1) % 2;  // largest odd side fitting the cell
    g.radius = box / 2;
    return g;
}

void validate_config(const DatasetConfig& c) {
    if (c.image_size < 16) throw ConfigError("image_size must be at least 16");
    if (c.roster.empty()) throw ConfigError("character roster is empty");
    if (c.backgrounds.empty()) throw ConfigError("background list is empty");
    if (c.actions.empty()) throw ConfigError("action list is empty");
    if (c.n_frames < 1) throw ConfigError("n_frames must be positive");
    std::set<std::string> names;
    for (const auto& ch : c.roster)
        if (!names.insert(ch.name).second) throw ConfigError("duplicate character name: " + ch.name);
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

}  // namespace

void render_frame(const SceneSpec& scene, const DatasetConfig& config, Image8& image,
                  std::vector<std::vector<uint8_t>>& masks) {
    validate_config(config);
    const int n = scene.image_size;
    if (n != config.image_size) throw DataError("scene image_size disagrees with config");
    if (scene.background < 0 || scene.background >= int(config.backgrounds.size()))
        throw DataError("background index out of range");
    std::set<int> cells;
    for (const auto& p : scene.chars) {
        if (p.roster_index < 0 || p.roster_index >= int(config.roster.size()))
            throw DataError("roster index out of range");
        if (p.cell < 0 || p.cell > 8) throw DataError("grid cell out of range");
        if (!cells.insert(p.cell).second) throw DataError("overlapping character positions");
    }

    image = Image8(n, n);
    const auto& bg = config.backgrounds[size_t(scene.background)].color;
    for (int i = 0; i < n * n; ++i)
        for (int c = 0; c < 3; ++c) image.rgb[size_t(i) * 3 + c] = bg[size_t(c)];

    const Grid g = grid_for(n);
    masks.assign(scene.chars.size(), std::vector<uint8_t>(size_t(n) * n, 0));
    for (size_t k = 0; k < scene.chars.size(); ++k) {
        const auto& p = scene.chars[k];
        const auto& ch = config.roster[size_t(p.roster_index)];
        const int cx = g.offset + (p.cell % 3) * g.cell + g.cell / 2;
        const int cy = g.offset + (p.cell / 3) * g.cell + g.cell / 2;
        for (const auto& [dx, dy] : shape_offsets(ch.shape, g.radius)) {
            const int x = cx + dx, y = cy + dy;
            if (x < 0 || x >= n || y < 0 || y >= n) continue;
            uint8_t* q = image.px(x, y);
            q[0] = ch.color[0];
            q[1] = ch.color[1];
            q[2] = ch.color[2];
            masks[k][size_t(y) * n + x] = 1;
        }
    }
}

std::string build_caption(const std::vector<std::string>& names, const std::string& action,
                          const std::string& background) {
    std::string out;
    for (size_t i = 0; i < names.size(); ++i) {
        if (i) out += " and ";
        out += names[i];
    }
    out += names.size() > 1 ? " are " : " is ";
    out += action + " in the " + background + " .";
    return out;
}

std::vector<std::string> extend_referential(const std::vector<std::string>& captions,
                                            const std::vector<std::vector<std::string>>& char_sets,
                                            const std::vector<CharacterSpec>& roster) {
    if (captions.size() != char_sets.size())
        throw DataError("extend_referential: caption/char-set count mismatch");
    std::vector<std::string> out = captions;
    for (size_t i = 1; i < captions.size(); ++i) {
        const auto& cur = char_sets[i];
        const auto& prev = char_sets[i - 1];
        if (cur.empty()) continue;
        const std::set<std::string> prev_set(prev.begin(), prev.end());
        bool subset = true;
        for (const auto& name : cur) subset = subset && prev_set.count(name) > 0;
        if (!subset) continue;

        std::vector<std::string> words = split_words(captions[i]);
        int first = -1, last = -1;
        for (const auto& name : cur) {
            const auto it = std::find(words.begin(), words.end(), name);
            if (it == words.end())
                throw DataError("extend_referential: character '" + name +
                                "' not found in caption " + std::to_string(i + 1));
            const int pos = int(it - words.begin());
            first = first < 0 ? pos : std::min(first, pos);
            last = std::max(last, pos);
        }

        std::string pronoun = "they";
        if (cur.size() == 1) {
            const auto rit = std::find_if(roster.begin(), roster.end(),
                                          [&](const CharacterSpec& c) { return c.name == cur[0]; });
            if (rit == roster.end())
                throw DataError("extend_referential: '" + cur[0] + "' is not a roster character");
            pronoun = pronoun_word(rit->pronoun);
        }
        if (first == 0) pronoun[0] = char(std::toupper(uint8_t(pronoun[0])));

        std::vector<std::string> rebuilt(words.begin(), words.begin() + first);
        rebuilt.push_back(pronoun);
        rebuilt.insert(rebuilt.end(), words.begin() + last + 1, words.end());
        const size_t verb_at = size_t(first) + 1;
        if (verb_at < rebuilt.size() && (rebuilt[verb_at] == "is" || rebuilt[verb_at] == "are"))
            rebuilt[verb_at] = cur.size() > 1 ? "are" : "is";
        out[i] = join_words(rebuilt);
    }
    return out;
}

StoryEpisode generate_episode(uint64_t seed, const DatasetConfig& config) {
    validate_config(config);
    Rng rng(derive_seed(seed, 0x5EED));
    StoryEpisode ep;

    const auto draw_fresh_cast = [&] {
        std::vector<int> idx(config.roster.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
        rng.shuffle(idx.begin(), idx.end());
        const int k = 1 + int(rng.uniform_int(uint64_t(std::min<size_t>(3, idx.size()))));
        idx.resize(size_t(k));
        std::sort(idx.begin(), idx.end());  // caption order follows roster order
        return idx;
    };

    std::vector<int> prev_cast;
    int prev_bg = -1;
    std::vector<std::vector<std::string>> char_sets;
    for (int f = 0; f < config.n_frames; ++f) {
        std::vector<int> cast;
        if (f > 0 && rng.uniform() < config.subset_prob) {
            cast = prev_cast;
            rng.shuffle(cast.begin(), cast.end());
            cast.resize(1 + rng.uniform_int(uint64_t(prev_cast.size())));
            std::sort(cast.begin(), cast.end());
        } else {
            cast = draw_fresh_cast();
        }
        int bg;
        if (f > 0 && rng.uniform() < 0.5)
            bg = prev_bg;
        else
            bg = int(rng.uniform_int(uint64_t(config.backgrounds.size())));
        const int action = int(rng.uniform_int(uint64_t(config.actions.size())));

        std::vector<int> cells(9);
        for (int i = 0; i < 9; ++i) cells[i] = i;
        rng.shuffle(cells.begin(), cells.end());

        SceneSpec scene;
        scene.image_size = config.image_size;
        scene.background = bg;
        for (size_t k = 0; k < cast.size(); ++k)
            scene.chars.push_back({cast[k], cells[k], action});

        Image8 image;
        std::vector<std::vector<uint8_t>> masks;
        render_frame(scene, config, image, masks);

        std::vector<std::string> names;
        for (int ci : cast) names.push_back(config.roster[size_t(ci)].name);
        const std::string caption = build_caption(names, config.actions[size_t(action)],
                                                  config.backgrounds[size_t(bg)].label);

        const std::vector<std::string> words = split_words(caption);
        std::vector<CharAnnotation> anns;
        for (size_t k = 0; k < names.size(); ++k) {
            CharAnnotation a;
            a.name = names[k];
            const auto it = std::find(words.begin(), words.end(), names[k]);
            a.token_index = 1 + int(it - words.begin());  // +1 for the <bos> slot
            a.mask = masks[k];
            a.crop = crop_from_mask(image, masks[k]);
            anns.push_back(std::move(a));
        }

        ep.frames.push_back(std::move(image));
        ep.captions_original.push_back(caption);
        ep.annotations.push_back(std::move(anns));
        ep.backgrounds.push_back(bg);
        char_sets.push_back(names);
        prev_cast = cast;
        prev_bg = bg;
    }
    ep.captions_referential = extend_referential(ep.captions_original, char_sets, config.roster);
    return ep;
}

BBox mask_bbox(const std::vector<uint8_t>& mask, int w, int h) {
    BBox b{w, h, 0, 0};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask[size_t(y) * w + x]) {
                b.x0 = std::min(b.x0, x);
                b.y0 = std::min(b.y0, y);
                b.x1 = std::max(b.x1, x + 1);
                b.y1 = std::max(b.y1, y + 1);
            }
    if (b.x1 <= b.x0) return BBox{};
    return b;
}

Image8 crop_from_mask(const Image8& frame, const std::vector<uint8_t>& mask) {
    BBox b = mask_bbox(mask, frame.w, frame.h);
    if (b.empty()) throw DataError("crop_from_mask: empty mask");
    b.x0 = std::max(0, b.x0 - 1);
    b.y0 = std::max(0, b.y0 - 1);
    b.x1 = std::min(frame.w, b.x1 + 1);
    b.y1 = std::min(frame.h, b.y1 + 1);
    Image8 crop(b.x1 - b.x0, b.y1 - b.y0);
    for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x) {
            const uint8_t* src = frame.px(x, y);
            uint8_t* dst = crop.px(x - b.x0, y - b.y0);
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = src[2];
        }
    return crop;
}

std::vector<uint8_t> downsample_mask(const std::vector<uint8_t>& mask, int w, int h, int tw,
                                     int th) {
    std::vector<uint8_t> out(size_t(tw) * th, 0);
    for (int ty = 0; ty < th; ++ty)
        for (int tx = 0; tx < tw; ++tx) {
            const int x0 = tx * w / tw, x1 = (tx + 1) * w / tw;
            const int y0 = ty * h / th, y1 = (ty + 1) * h / th;
            int on = 0, total = 0;
            for (int y = y0; y < std::max(y1, y0 + 1); ++y)
                for (int x = x0; x < std::max(x1, x0 + 1); ++x) {
                    on += mask[size_t(y) * w + x];
                    ++total;
                }
            out[size_t(ty) * tw + tx] = (2 * on >= total) ? 1 : 0;
        }
    return out;
}

std::vector<int> mask_to_rle(const std::vector<uint8_t>& mask) {
    std::vector<int> rle;
    uint8_t cur = 0;
    int run = 0;
    for (uint8_t v : mask) {
        if ((v != 0) == (cur != 0)) {
            ++run;
        } else {
            rle.push_back(run);
            cur = v;
            run = 1;
        }
    }
    rle.push_back(run);
    return rle;
}

std::vector<uint8_t> rle_to_mask(const std::vector<int>& rle, size_t expected_size) {
    std::vector<uint8_t> mask;
    mask.reserve(expected_size);
    uint8_t cur = 0;
    for (int run : rle) {
        if (run < 0) throw DataError("mask RLE: negative run");
        mask.insert(mask.end(), size_t(run), cur);
        cur = cur ? 0 : 1;
    }
    if (mask.size() != expected_size) throw DataError("mask RLE: size mismatch");
    return mask;
}

namespace {

json config_to_json(const DatasetConfig& c) {
    json roster = json::array();
    for (const auto& ch : c.roster)
        roster.push_back({{"name", ch.name},
                          {"shape", shape_name(ch.shape)},
                          {"color", {ch.color[0], ch.color[1], ch.color[2]}},
                          {"pronoun", pronoun_word(ch.pronoun)}});
    json bgs = json::array();
    for (const auto& b : c.backgrounds)
        bgs.push_back({{"label", b.label}, {"color", {b.color[0], b.color[1], b.color[2]}}});
    return {{"n_frames", c.n_frames},
            {"image_size", c.image_size},
            {"subset_prob", c.subset_prob},
            {"roster", roster},
            {"backgrounds", bgs},
            {"actions", c.actions}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig c;
    c.n_frames = j.at("n_frames").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.subset_prob = j.at("subset_prob").get<double>();
    for (const auto& r : j.at("roster")) {
        CharacterSpec ch;
        ch.name = r.at("name").get<std::string>();
        ch.shape = shape_from_name(r.at("shape").get<std::string>());
        const auto col = r.at("color");
        ch.color = {col.at(0).get<uint8_t>(), col.at(1).get<uint8_t>(), col.at(2).get<uint8_t>()};
        ch.pronoun = pronoun_from_word(r.at("pronoun").get<std::string>());
        c.roster.push_back(std::move(ch));
    }
    for (const auto& b : j.at("backgrounds")) {
        BackgroundSpec bg;
        bg.label = b.at("label").get<std::string>();
        const auto col = b.at("color");
        bg.color = {col.at(0).get<uint8_t>(), col.at(1).get<uint8_t>(), col.at(2).get<uint8_t>()};
        c.backgrounds.push_back(std::move(bg));
    }
    c.actions = j.at("actions").get<std::vector<std::string>>();
    return c;
}

std::string ep_dirname(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "ep%04zu", i);
    return buf;
}

}  // namespace

std::string serialize_dataset(const std::vector<StoryEpisode>& episodes, const std::string& dir,
                              const DatasetConfig& config) {
    validate_config(config);
    fs::create_directories(dir);
    json index = json::array();
    for (size_t i = 0; i < episodes.size(); ++i) {
        const auto& ep = episodes[i];
        const std::string sub = ep_dirname(i);
        fs::create_directories(fs::path(dir) / sub);
        json anns_all = json::array();
        for (size_t f = 0; f < ep.frames.size(); ++f) {
            write_png_rgb8((fs::path(dir) / sub / ("frame" + std::to_string(f) + ".png")).string(),
                           ep.frames[f]);
            json anns = json::array();
            for (const auto& a : ep.annotations[f])
                anns.push_back({{"name", a.name},
                                {"token_index", a.token_index},
                                {"mask_rle", mask_to_rle(a.mask)}});
            anns_all.push_back(std::move(anns));
        }
        json epj = {{"captions_original", ep.captions_original},
                    {"captions_referential", ep.captions_referential},
                    {"backgrounds", ep.backgrounds},
                    {"annotations", anns_all}};
        std::ofstream out(fs::path(dir) / sub / "episode.json");
        out << epj.dump(1) << '\n';
        index.push_back({{"id", i}, {"dir", sub}, {"n_frames", ep.frames.size()}});
    }
    json manifest = {
        {"schema_version", 1},
        {"config", config_to_json(config)},
        {"mask_encoding",
         "row-major run-length; alternating run counts starting with a zero-run"},
        {"episodes", index}};
    const std::string mpath = (fs::path(dir) / "manifest.json").string();
    std::ofstream out(mpath);
    out << manifest.dump(1) << '\n';
    if (!out) throw DataError("cannot write manifest: " + mpath);
    return mpath;
}

std::vector<StoryEpisode> load_dataset(const std::string& dir, DatasetConfig* out_config) {
    const std::string mpath = (fs::path(dir) / "manifest.json").string();
    json manifest;
    {
        std::ifstream in(mpath);
        if (!in) throw DataError("missing manifest: " + mpath);
        try {
            in >> manifest;
        } catch (const json::exception& e) {
            throw DataError("corrupt manifest " + mpath + ": " + e.what());
        }
    }
    if (!manifest.contains("schema_version") || manifest["schema_version"].get<int>() != 1)
        throw DataError("unsupported dataset schema version in " + mpath);
    DatasetConfig config;
    try {
        config = config_from_json(manifest.at("config"));
    } catch (const json::exception& e) {
        throw DataError("corrupt manifest " + mpath + ": " + e.what());
    }
    if (out_config) *out_config = config;

    std::vector<StoryEpisode> episodes;
    const size_t npx = size_t(config.image_size) * config.image_size;
    for (const auto& entry : manifest.at("episodes")) {
        const std::string sub = entry.at("dir").get<std::string>();
        const size_t n_frames = entry.at("n_frames").get<size_t>();
        const std::string ejpath = (fs::path(dir) / sub / "episode.json").string();
        json epj;
        {
            std::ifstream in(ejpath);
            if (!in) throw DataError("missing episode file: " + ejpath);
            try {
                in >> epj;
            } catch (const json::exception& e) {
                throw DataError("corrupt episode file " + ejpath + ": " + e.what());
            }
        }
        StoryEpisode ep;
        try {
            ep.captions_original = epj.at("captions_original").get<std::vector<std::string>>();
            ep.captions_referential =
                epj.at("captions_referential").get<std::vector<std::string>>();
            ep.backgrounds = epj.at("backgrounds").get<std::vector<int>>();
            for (size_t f = 0; f < n_frames; ++f) {
                const std::string fpath =
                    (fs::path(dir) / sub / ("frame" + std::to_string(f) + ".png")).string();
                ep.frames.push_back(read_png_rgb8(fpath));
                std::vector<CharAnnotation> anns;
                for (const auto& aj : epj.at("annotations").at(f)) {
                    CharAnnotation a;
                    a.name = aj.at("name").get<std::string>();
                    a.token_index = aj.at("token_index").get<int>();
                    a.mask = rle_to_mask(aj.at("mask_rle").get<std::vector<int>>(), npx);
                    a.crop = crop_from_mask(ep.frames.back(), a.mask);
                    anns.push_back(std::move(a));
                }
                ep.annotations.push_back(std::move(anns));
            }
        } catch (const json::exception& e) {
            throw DataError("corrupt episode file " + ejpath + ": " + e.what());
        }
        if (ep.captions_original.size() != n_frames ||
            ep.captions_referential.size() != n_frames || ep.backgrounds.size() != n_frames)
            throw DataError("inconsistent episode field counts in " + ejpath);
        episodes.push_back(std::move(ep));
    }
    return episodes;
}

}  // namespace storyviz
