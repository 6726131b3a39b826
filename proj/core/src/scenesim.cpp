#include "dynpatch/scenesim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dynpatch/common.hpp"
#include "dynpatch/png_io.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ---------------------------------------------------------------------------
// classes

const char* class_name(int id) {
    switch (id) {
        case kClassStop: return "stop";
        case kClassGoStraight: return "go_straight";
        case kClassTurn: return "turn";
        case kClassPedestrian: return "pedestrian";
        case kClassCar: return "car";
        default: throw ValidationError("unknown class id " + std::to_string(id));
    }
}

int class_id(const std::string& name) {
    for (int i = 0; i < kNumClasses; ++i)
        if (name == class_name(i)) return i;
    throw ValidationError("unknown class name: " + name);
}

// ---------------------------------------------------------------------------
// Image8

Image8 Image8::from(const Image& img) {
    Image8 out;
    out.width = img.width;
    out.height = img.height;
    out.px.resize(img.px.size());
    for (size_t i = 0; i < img.px.size(); ++i) {
        double v = std::clamp(img.px[i], 0.0, 1.0);
        out.px[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

Image Image8::to_image() const {
    Image out(width, height);
    for (size_t i = 0; i < px.size(); ++i) out.px[i] = px[i] / 255.0;
    return out;
}

// ---------------------------------------------------------------------------
// poses

double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2.0 * kPi);
    if (a < 0) a += 2.0 * kPi;
    return a - kPi;
}

double Pose2D::distance_to(const Pose2D& o) const { return std::hypot(x - o.x, y - o.y); }

void Pose2D::validate(const char* who) const {
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(heading))
        throw ValidationError(std::string(who) + ": non-finite pose");
}

// ---------------------------------------------------------------------------
// photometric model

void PhotometricModel::validate() const {
    for (double g : gain)
        if (!(g > 0.0) || !std::isfinite(g)) throw ValidationError("photometric: gain must be > 0");
    for (double b : bias)
        if (!std::isfinite(b)) throw ValidationError("photometric: non-finite bias");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ValidationError("photometric: gamma must be > 0");
    if (blur_radius < 0.0 || !std::isfinite(blur_radius))
        throw ValidationError("photometric: blur radius must be >= 0");
    if (noise_amplitude < 0.0 || !std::isfinite(noise_amplitude))
        throw ValidationError("photometric: noise amplitude must be >= 0");
}

bool PhotometricModel::is_identity() const {
    return gain == std::array<double, 3>{1.0, 1.0, 1.0} && bias == std::array<double, 3>{0.0, 0.0, 0.0} &&
           gamma == 1.0 && blur_radius == 0.0 && noise_amplitude == 0.0;
}

Image apply_photometric(const PhotometricModel& model, const Image& image) {
    model.validate();
    Image out = image;
    const size_t n = out.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        for (int c = 0; c < 3; ++c) {
            double v = out.px[p * 3 + static_cast<size_t>(c)];
            v = model.gain[static_cast<size_t>(c)] * v + model.bias[static_cast<size_t>(c)];
            if (model.gamma != 1.0) v = std::pow(std::max(v, 0.0), model.gamma);
            out.px[p * 3 + static_cast<size_t>(c)] = v;
        }
    }
    if (model.blur_radius > 1e-6) {
        const double sigma = model.blur_radius;
        const int r = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
        std::vector<double> k(static_cast<size_t>(2 * r + 1));
        double ksum = 0.0;
        for (int i = -r; i <= r; ++i) {
            k[static_cast<size_t>(i + r)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
            ksum += k[static_cast<size_t>(i + r)];
        }
        for (auto& v : k) v /= ksum;
        Image mid = out;
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                for (int c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (int i = -r; i <= r; ++i)
                        acc += k[static_cast<size_t>(i + r)] * out.at(y, std::clamp(x + i, 0, out.width - 1), c);
                    mid.at(y, x, c) = acc;
                }
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                for (int c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (int i = -r; i <= r; ++i)
                        acc += k[static_cast<size_t>(i + r)] * mid.at(std::clamp(y + i, 0, out.height - 1), x, c);
                    out.at(y, x, c) = acc;
                }
    }
    if (model.noise_amplitude > 0.0) {
        Rng rng(derive_seed(model.seed, "photometric-noise"));
        for (auto& v : out.px) v += model.noise_amplitude * rng.normal();
    }
    clamp01(out);
    return out;
}

// ---------------------------------------------------------------------------
// scene config

void SceneConfig::validate() const {
    if (image_side < 32) throw ValidationError("scene: image side too small");
    if (focal_px <= 0 || camera_height <= 0 || near_plane <= 0)
        throw ValidationError("scene: camera parameters must be positive");
    if (car_length <= 0 || car_width <= 0 || car_height <= 0)
        throw ValidationError("scene: car geometry must be positive");
    if (screen_width <= 0 || screen_height <= 0 || screen_resolution < 8)
        throw ValidationError("scene: screen geometry must be positive");
    if (sign_size <= 0) throw ValidationError("scene: sign size must be positive");
    if (pose_noise_sigma < 0) throw ValidationError("scene: pose noise must be >= 0");
    bool has_non_stop = false;
    for (int c : sign_classes) {
        if (c < kClassStop || c > kClassPedestrian)
            throw ValidationError("scene: sign_classes must name sign classes");
        if (c != kClassStop) has_non_stop = true;
    }
    if (!has_non_stop) throw ValidationError("scene: need at least one non-stop sign class");
    photometric.validate();
}

SceneConfig default_scene_config() {
    SceneConfig cfg;
    cfg.photometric.gain = {0.86, 0.95, 0.80};
    cfg.photometric.bias = {0.05, 0.02, 0.08};
    cfg.photometric.gamma = 1.25;
    cfg.photometric.blur_radius = 0.6;
    cfg.photometric.noise_amplitude = 0.012;
    return cfg;
}

// ---------------------------------------------------------------------------
// projection

Pose2D to_camera_frame(const Pose2D& p, const Pose2D& camera) {
    double dx = p.x - camera.x;
    double dy = p.y - camera.y;
    double c = std::cos(-camera.heading), s = std::sin(-camera.heading);
    return {c * dx - s * dy, s * dx + c * dy, wrap_angle(p.heading - camera.heading)};
}

namespace {

struct Projector {
    double f, cx, cy, cam_h;
    int side;

    Point2 project(double x, double y, double z) const {
        return {cx - f * y / x, cy - f * (z - cam_h) / x};
    }
};

Projector make_projector(const SceneConfig& cfg) {
    double c = 0.5 * (cfg.image_side - 1);
    return {cfg.focal_px, c, c, cfg.camera_height, cfg.image_side};
}

double lattice_value(int ix, int iy, uint64_t seed) {
    uint64_t h = seed;
    h = fnv1a64(&ix, sizeof(ix), h);
    h = fnv1a64(&iy, sizeof(iy), h);
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double u, double v, uint64_t seed) {
    double fu = std::floor(u), fv = std::floor(v);
    int iu = static_cast<int>(fu), iv = static_cast<int>(fv);
    double tu = smoothstep(u - fu), tv = smoothstep(v - fv);
    double a = lattice_value(iu, iv, seed), b = lattice_value(iu + 1, iv, seed);
    double c = lattice_value(iu, iv + 1, seed), d = lattice_value(iu + 1, iv + 1, seed);
    return (a * (1 - tu) + b * tu) * (1 - tv) + (c * (1 - tu) + d * tu) * tv;
}

double fbm2(double u, double v, uint64_t seed) {
    return 0.65 * value_noise(u, v, seed) + 0.35 * value_noise(2.7 * u + 13.0, 2.7 * v + 7.0, seed + 1);
}

struct BackgroundPalette {
    double ground_r, ground_g, ground_b;
    double alt_r, alt_g, alt_b;
    double sky_top_r, sky_top_g, sky_top_b;
    double sky_bot_r, sky_bot_g, sky_bot_b;
    double road_gray;
    double cross_road_x;  // world x of the crossing road center
    double road_half;
    uint64_t noise_seed;
};

BackgroundPalette make_palette(uint64_t background_seed) {
    Rng rng(derive_seed(background_seed, "palette"));
    BackgroundPalette p;
    p.ground_r = rng.uniform(0.30, 0.50);
    p.ground_g = rng.uniform(0.42, 0.62);
    p.ground_b = rng.uniform(0.22, 0.38);
    p.alt_r = rng.uniform(0.45, 0.70);
    p.alt_g = rng.uniform(0.40, 0.60);
    p.alt_b = rng.uniform(0.25, 0.45);
    p.sky_top_r = rng.uniform(0.25, 0.55);
    p.sky_top_g = rng.uniform(0.45, 0.70);
    p.sky_top_b = rng.uniform(0.75, 0.95);
    p.sky_bot_r = rng.uniform(0.65, 0.85);
    p.sky_bot_g = rng.uniform(0.70, 0.90);
    p.sky_bot_b = rng.uniform(0.80, 0.98);
    p.road_gray = rng.uniform(0.16, 0.30);
    p.cross_road_x = rng.uniform(2.8, 5.6);
    p.road_half = rng.uniform(0.65, 0.95);
    p.noise_seed = derive_seed(background_seed, "noise");
    return p;
}

void render_background(Image& img, const SceneConfig& cfg, const BackgroundPalette& pal,
                       double forward_shift, double side_shift) {
    Projector pr = make_projector(cfg);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            double u = static_cast<double>(x), v = static_cast<double>(y);
            if (v <= pr.cy + 0.75) {
                double t = (pr.cy - v) / std::max(pr.cy, 1.0);
                double n = 0.06 * (fbm2(0.03 * u + side_shift, 0.05 * v, pal.noise_seed + 7) - 0.5);
                img.set(y, x, std::clamp(pal.sky_bot_r + t * (pal.sky_top_r - pal.sky_bot_r) + n, 0.0, 1.0),
                        std::clamp(pal.sky_bot_g + t * (pal.sky_top_g - pal.sky_bot_g) + n, 0.0, 1.0),
                        std::clamp(pal.sky_bot_b + t * (pal.sky_top_b - pal.sky_bot_b) + n, 0.0, 1.0));
            } else {
                double depth = pr.cam_h * pr.f / (v - pr.cy);
                double gx = depth + forward_shift;
                double gy = -depth * (u - pr.cx) / pr.f + side_shift;
                double fade = std::clamp((depth - 25.0) / 20.0, 0.0, 1.0);
                double n = fbm2(0.8 * gx, 0.8 * gy, pal.noise_seed);
                double blotch = fbm2(0.22 * gx + 31.0, 0.22 * gy - 17.0, pal.noise_seed + 2);
                double r, g, b;
                bool on_main_road = std::abs(gy - side_shift) < pal.road_half;
                bool on_cross_road = std::abs(gx - pal.cross_road_x - forward_shift * 0.0) < pal.road_half;
                if (on_main_road || on_cross_road) {
                    double shade = pal.road_gray * (0.85 + 0.3 * n);
                    r = g = b = shade;
                    // dashed center line of the main road
                    if (on_main_road && std::abs(gy - side_shift) < 0.035 &&
                        std::fmod(std::abs(gx), 0.6) < 0.3) {
                        r = g = b = 0.85;
                    }
                } else {
                    double mixv = blotch > 0.62 ? 1.0 : 0.0;
                    r = (1 - mixv) * pal.ground_r + mixv * pal.alt_r;
                    g = (1 - mixv) * pal.ground_g + mixv * pal.alt_g;
                    b = (1 - mixv) * pal.ground_b + mixv * pal.alt_b;
                    double shade = 0.82 + 0.36 * n;
                    r *= shade;
                    g *= shade;
                    b *= shade;
                }
                double sky_r = pal.sky_bot_r, sky_g = pal.sky_bot_g, sky_b = pal.sky_bot_b;
                img.set(y, x, std::clamp(r + fade * (sky_r - r), 0.0, 1.0),
                        std::clamp(g + fade * (sky_g - g), 0.0, 1.0),
                        std::clamp(b + fade * (sky_b - b), 0.0, 1.0));
            }
        }
    }
}

// Fills a convex projected polygon; fixes winding, skips degenerate ones.
void fill_face(Image& img, std::array<Point2, 4> pts, double r, double g, double b) {
    Quad q;
    q.corners = pts;
    if (q.signed_area() < 0.0) {
        std::swap(q.corners[1], q.corners[3]);
    }
    if (!q.is_valid()) return;
    fill_quad(img, q, r, g, b);
}

struct ScreenGeometry {
    bool visible = false;
    Quad quad{};
};

ScreenGeometry compute_screen(const Pose2D& patch_car_cam, const SceneConfig& cfg) {
    ScreenGeometry out;
    double psi = patch_car_cam.heading + cfg.screen_mount_angle;
    double nx = std::cos(psi), ny = std::sin(psi);
    // support distance of the body rectangle along the mount direction
    double d = std::abs(std::cos(cfg.screen_mount_angle)) * cfg.car_length * 0.5 +
               std::abs(std::sin(cfg.screen_mount_angle)) * cfg.car_width * 0.5 + cfg.screen_standoff;
    double cx = patch_car_cam.x + nx * d;
    double cy = patch_car_cam.y + ny * d;
    // facing: screen normal must point back toward the camera at the origin
    double dist = std::hypot(cx, cy);
    if (dist < 1e-6) return out;
    double facing = (nx * cx + ny * cy) / dist;
    if (facing > -0.08) return out;

    double tx = -ny, ty = nx;
    double hw = 0.5 * cfg.screen_width;
    double ex0 = cx + tx * hw, ey0 = cy + ty * hw;
    double ex1 = cx - tx * hw, ey1 = cy - ty * hw;
    if (ex0 <= cfg.near_plane || ex1 <= cfg.near_plane) return out;

    Projector pr = make_projector(cfg);
    double z0 = cfg.screen_bottom, z1 = cfg.screen_bottom + cfg.screen_height;
    Point2 a_top = pr.project(ex0, ey0, z1), a_bot = pr.project(ex0, ey0, z0);
    Point2 b_top = pr.project(ex1, ey1, z1), b_bot = pr.project(ex1, ey1, z0);
    bool a_is_left = a_top.x < b_top.x;
    Quad q;
    q.corners[0] = a_is_left ? a_top : b_top;
    q.corners[1] = a_is_left ? b_top : a_top;
    q.corners[2] = a_is_left ? b_bot : a_bot;
    q.corners[3] = a_is_left ? a_bot : b_bot;
    if (!q.is_valid()) return out;
    if (q.signed_area() < 30.0) return out;
    BBox bb = q.bounding_box();
    if (bb.x_max < 0 || bb.y_max < 0 || bb.x_min > cfg.image_side - 1 || bb.y_min > cfg.image_side - 1)
        return out;
    out.visible = true;
    out.quad = q;
    return out;
}

// Bounding box of quad-interior pixel centers; false when too few pixels.
bool pixel_footprint_box(const Quad& q, int side, int min_pixels, BBox& out) {
    BBox bb = q.bounding_box();
    int x0 = std::max(0, static_cast<int>(std::floor(bb.x_min)));
    int y0 = std::max(0, static_cast<int>(std::floor(bb.y_min)));
    int x1 = std::min(side - 1, static_cast<int>(std::ceil(bb.x_max)));
    int y1 = std::min(side - 1, static_cast<int>(std::ceil(bb.y_max)));
    int count = 0;
    int mnx = side, mny = side, mxx = -1, mxy = -1;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (q.contains({static_cast<double>(x), static_cast<double>(y)})) {
                ++count;
                mnx = std::min(mnx, x);
                mny = std::min(mny, y);
                mxx = std::max(mxx, x);
                mxy = std::max(mxy, y);
            }
    if (count < min_pixels || mxx < mnx || mxy < mny) return false;
    out = BBox{static_cast<double>(mnx), static_cast<double>(mny), static_cast<double>(mxx + 1),
               static_cast<double>(mxy + 1)};
    return out.is_valid();
}

}  // namespace

std::optional<Quad> screen_quad(const Pose2D& camera, const Pose2D& patch_car,
                                const SceneConfig& config) {
    camera.validate("camera");
    patch_car.validate("patch car");
    Pose2D pc = to_camera_frame(patch_car, camera);
    ScreenGeometry g = compute_screen(pc, config);
    if (!g.visible) return std::nullopt;
    return g.quad;
}

// ---------------------------------------------------------------------------
// sign textures

Image make_sign_texture(int sign_class, int resolution) {
    if (resolution < 8) throw ValidationError("sign texture: resolution too small");
    Image img(resolution, resolution);
    const double n = resolution;
    auto inside_circle = [&](int x, int y, double r) {
        double dx = x - 0.5 * (n - 1), dy = y - 0.5 * (n - 1);
        return std::hypot(dx, dy) <= r * n;
    };
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            double u = x / (n - 1), v = y / (n - 1);
            double r = 0, g = 0, b = 0;
            switch (sign_class) {
                case kClassStop: {
                    // red octagon, white band
                    double du = std::abs(u - 0.5), dv = std::abs(v - 0.5);
                    bool oct = du < 0.46 && dv < 0.46 && (du + dv) < 0.66;
                    if (oct) {
                        bool band = std::abs(v - 0.5) < 0.12 && std::abs(u - 0.5) < 0.34;
                        r = band ? 0.95 : 0.78;
                        g = band ? 0.95 : 0.05;
                        b = band ? 0.95 : 0.08;
                    } else {
                        r = g = b = 0.9;
                    }
                    break;
                }
                case kClassGoStraight: {
                    // blue disc, white up arrow
                    if (inside_circle(x, y, 0.47)) {
                        bool shaft = std::abs(u - 0.5) < 0.08 && v > 0.3 && v < 0.78;
                        bool head = v >= 0.16 && v < 0.34 && std::abs(u - 0.5) < (v - 0.12) * 0.75;
                        bool arrow = shaft || head;
                        r = arrow ? 0.95 : 0.06;
                        g = arrow ? 0.95 : 0.25;
                        b = arrow ? 0.95 : 0.80;
                    } else {
                        r = g = b = 0.9;
                    }
                    break;
                }
                case kClassTurn: {
                    // blue disc, white bent arrow
                    if (inside_circle(x, y, 0.47)) {
                        bool shaft = std::abs(u - 0.38) < 0.08 && v > 0.34 && v < 0.8;
                        bool arm = std::abs(v - 0.38) < 0.08 && u > 0.34 && u < 0.66;
                        bool head = u >= 0.58 && u < 0.82 && std::abs(v - 0.38) < (0.84 - u) * 0.6;
                        bool arrow = shaft || arm || head;
                        r = arrow ? 0.95 : 0.06;
                        g = arrow ? 0.95 : 0.40;
                        b = arrow ? 0.95 : 0.65;
                    } else {
                        r = g = b = 0.9;
                    }
                    break;
                }
                case kClassPedestrian: {
                    // yellow diamond, dark walker glyph
                    bool diamond = std::abs(u - 0.5) + std::abs(v - 0.5) < 0.48;
                    if (diamond) {
                        bool headc = std::hypot(u - 0.5, v - 0.27) < 0.075;
                        bool body = std::abs(u - 0.5) < 0.06 && v > 0.33 && v < 0.58;
                        bool legl = std::abs(u - (0.5 - (v - 0.58) * 0.7)) < 0.05 && v >= 0.58 && v < 0.78;
                        bool legr = std::abs(u - (0.5 + (v - 0.58) * 0.5)) < 0.05 && v >= 0.58 && v < 0.78;
                        bool glyph = headc || body || legl || legr;
                        r = glyph ? 0.12 : 0.93;
                        g = glyph ? 0.10 : 0.80;
                        b = glyph ? 0.08 : 0.10;
                    } else {
                        r = g = b = 0.9;
                    }
                    break;
                }
                default:
                    throw ValidationError("sign texture: not a sign class");
            }
            img.set(y, x, r, g, b);
        }
    }
    quantize8(img);
    return img;
}

// ---------------------------------------------------------------------------
// frame rendering

FrameRecord render_frame(const SceneConfig& config, uint64_t seed, const Pose2D& camera,
                         const Pose2D& patch_car, const Pose2D& sign_pose, int sign_class,
                         const Image* patch) {
    config.validate();
    camera.validate("camera");
    patch_car.validate("patch car");
    sign_pose.validate("sign");
    if (sign_class < kClassStop || sign_class > kClassPedestrian)
        throw ValidationError("render_frame: invalid sign class");

    FrameRecord rec;
    rec.seed = seed;
    rec.camera = camera;
    rec.patch_car = patch_car;
    rec.sign = sign_pose;
    rec.sign_class = sign_class;
    rec.mount_angle = config.screen_mount_angle;

    Rng frame_rng(derive_seed(seed, "frame-noise"));
    BackgroundPalette pal = make_palette(config.background_seed);
    Image img(config.image_side, config.image_side);
    double forward_shift = frame_rng.uniform(0.0, 4.0);
    double side_shift = frame_rng.uniform(-0.08, 0.08);
    render_background(img, config, pal, forward_shift, side_shift);

    Projector pr = make_projector(config);
    Pose2D sc = to_camera_frame(sign_pose, camera);
    Pose2D pc = to_camera_frame(patch_car, camera);

    struct Entity {
        double depth;
        int kind;  // 0 sign, 1 car
    };
    std::vector<Entity> order;
    order.push_back({std::hypot(sc.x, sc.y), 0});
    order.push_back({std::hypot(pc.x, pc.y), 1});
    std::sort(order.begin(), order.end(), [](const Entity& a, const Entity& b) { return a.depth > b.depth; });

    ScreenGeometry screen = compute_screen(pc, config);

    auto draw_sign = [&]() {
        if (sc.x <= config.near_plane * 1.5) return;
        double dist = std::hypot(sc.x, sc.y);
        if (dist < 1e-6) return;
        double nx = -sc.x / dist, ny = -sc.y / dist;
        double tx = -ny, ty = nx;
        double hw = 0.5 * config.sign_size;
        double z0 = config.sign_bottom, z1 = config.sign_bottom + config.sign_size;
        double ex0 = sc.x + tx * hw, ey0 = sc.y + ty * hw;
        double ex1 = sc.x - tx * hw, ey1 = sc.y - ty * hw;
        if (ex0 <= config.near_plane || ex1 <= config.near_plane) return;
        Point2 a_top = pr.project(ex0, ey0, z1), a_bot = pr.project(ex0, ey0, z0);
        Point2 b_top = pr.project(ex1, ey1, z1), b_bot = pr.project(ex1, ey1, z0);
        bool a_left = a_top.x < b_top.x;
        Quad board;
        board.corners[0] = a_left ? a_top : b_top;
        board.corners[1] = a_left ? b_top : a_top;
        board.corners[2] = a_left ? b_bot : a_bot;
        board.corners[3] = a_left ? a_bot : b_bot;
        if (!board.is_valid() || board.signed_area() < 16.0) return;
        BBox footprint;
        if (!pixel_footprint_box(board, config.image_side, 12, footprint)) return;

        // pole
        double pw = 0.018;
        Point2 p0 = pr.project(sc.x, sc.y - pw, 0.0);
        Point2 p1 = pr.project(sc.x, sc.y + pw, 0.0);
        Point2 p2 = pr.project(sc.x, sc.y + pw, z0);
        Point2 p3 = pr.project(sc.x, sc.y - pw, z0);
        fill_face(img, {p3, p2, p1, p0}, 0.25, 0.25, 0.28);

        Image tex = make_sign_texture(sign_class, 64);
        img = warp_composite(img, tex, board);
        rec.sign_visible = true;
        rec.sign_box = footprint;
    };

    auto draw_car = [&]() {
        if (pc.x <= config.near_plane) return;
        double ch = pc.heading;
        double cth = std::cos(ch), sth = std::sin(ch);
        double hl = 0.5 * config.car_length, hwid = 0.5 * config.car_width;
        auto corner = [&](double lx, double ly) {
            return Point2{pc.x + cth * lx - sth * ly, pc.y + sth * lx + cth * ly};
        };
        Point2 g[4] = {corner(hl, hwid), corner(hl, -hwid), corner(-hl, -hwid), corner(-hl, hwid)};
        for (const auto& p : g)
            if (p.x <= config.near_plane) return;

        double z0 = 0.02, z1 = config.car_height;
        struct Face {
            std::array<Point2, 4> pts;
            double depth;
            double shade;
        };
        std::vector<Face> faces;
        // side faces between consecutive ground corners
        const double shades[4] = {0.62, 0.80, 0.62, 0.80};
        for (int i = 0; i < 4; ++i) {
            const Point2& a = g[i];
            const Point2& b = g[(i + 1) % 4];
            // outward normal of edge a->b (body wound ccw in plan view)
            double exn = b.y - a.y, eyn = -(b.x - a.x);
            double mx = 0.5 * (a.x + b.x), my = 0.5 * (a.y + b.y);
            if (exn * mx + eyn * my >= 0.0) continue;  // back-facing
            Face f;
            f.pts = {pr.project(a.x, a.y, z1), pr.project(b.x, b.y, z1), pr.project(b.x, b.y, z0),
                     pr.project(a.x, a.y, z0)};
            f.depth = std::hypot(mx, my);
            f.shade = shades[i];
            faces.push_back(f);
        }
        // top face
        {
            Face f;
            f.pts = {pr.project(g[0].x, g[0].y, z1), pr.project(g[1].x, g[1].y, z1),
                     pr.project(g[2].x, g[2].y, z1), pr.project(g[3].x, g[3].y, z1)};
            f.depth = std::hypot(pc.x, pc.y) + 0.01;
            f.shade = 1.0;
            faces.push_back(f);
        }
        std::sort(faces.begin(), faces.end(), [](const Face& a, const Face& b) { return a.depth > b.depth; });
        const double br = 0.46, bg = 0.48, bb = 0.54;
        double mnx = 1e9, mny = 1e9, mxx = -1e9, mxy = -1e9;
        for (const auto& f : faces) {
            fill_face(img, f.pts, br * f.shade, bg * f.shade, bb * f.shade);
            for (const auto& p : f.pts) {
                mnx = std::min(mnx, p.x);
                mny = std::min(mny, p.y);
                mxx = std::max(mxx, p.x);
                mxy = std::max(mxy, p.y);
            }
        }

        if (screen.visible) {
            // calibration display; a supplied patch replaces it afterwards
            fill_quad(img, screen.quad, config.calibration_blue[0], config.calibration_blue[1],
                      config.calibration_blue[2]);
            rec.screen_visible = true;
            rec.screen_quad = screen.quad;
            BBox sq = screen.quad.bounding_box();
            mnx = std::min(mnx, sq.x_min);
            mny = std::min(mny, sq.y_min);
            mxx = std::max(mxx, sq.x_max);
            mxy = std::max(mxy, sq.y_max);
        }
        mnx = std::clamp(mnx, 0.0, static_cast<double>(config.image_side));
        mny = std::clamp(mny, 0.0, static_cast<double>(config.image_side));
        mxx = std::clamp(mxx, 0.0, static_cast<double>(config.image_side));
        mxy = std::clamp(mxy, 0.0, static_cast<double>(config.image_side));
        if (mxx - mnx >= 4.0 && mxy - mny >= 3.0) {
            rec.car_visible = true;
            rec.car_box = BBox{mnx, mny, mxx, mxy};
        }
    };

    for (const auto& e : order) {
        if (e.kind == 0)
            draw_sign();
        else
            draw_car();
    }

    quantize8(img);
    rec.image = Image8::from(img);

    Rng slam(derive_seed(seed, "slam"));
    auto noisy = [&](const Pose2D& p) {
        return Pose2D{p.x + slam.normal(0.0, config.pose_noise_sigma),
                      p.y + slam.normal(0.0, config.pose_noise_sigma),
                      wrap_angle(p.heading + slam.normal(0.0, config.heading_noise_sigma))};
    };
    rec.recorded_camera = noisy(camera);
    rec.recorded_patch_car = noisy(patch_car);
    rec.recorded_sign = noisy(sign_pose);

    if (patch != nullptr) {
        if (!rec.screen_visible)
            throw ValidationError("render_frame: patch supplied but screen not visible");
        Image with_patch = apply_patch_to_frame(rec, *patch, config);
        rec.image = Image8::from(with_patch);
    }
    return rec;
}

Image apply_patch_to_frame(const FrameRecord& record, const Image& patch, const SceneConfig& config) {
    if (!record.screen_visible) throw ValidationError("apply_patch_to_frame: screen not visible");
    PhotometricModel m = config.photometric.with_seed(derive_seed(record.seed, "screen"));
    Image captured = apply_photometric(m, patch);
    Image out = warp_composite(record.image.to_image(), captured, record.screen_quad);
    quantize8(out);
    return out;
}

// ---------------------------------------------------------------------------
// dataset generation

DatasetManifest generate_driving_dataset(const SceneConfig& config, const TrajectorySpec& spec,
                                         int n_frames, uint64_t seed) {
    config.validate();
    if (n_frames < 0) throw ValidationError("dataset: n_frames must be >= 0");
    if (spec.layouts.empty()) throw ValidationError("dataset: need at least one layout");
    if (!(spec.distance_min < spec.distance_max))
        throw ValidationError("dataset: empty distance range");
    if (spec.distance_min <= config.near_plane)
        throw ValidationError("dataset: distance range starts behind the near plane");

    DatasetManifest manifest;
    manifest.image_side = config.image_side;
    manifest.seed = seed;
    manifest.frames.resize(static_cast<size_t>(n_frames));

    parallel_for(n_frames, [&](int64_t i) {
        Rng rng(derive_seed(seed, "traj", static_cast<uint64_t>(i)));
        Layout layout = spec.layouts[static_cast<size_t>(i) % spec.layouts.size()];
        uint64_t frame_seed = derive_seed(seed, "frame", static_cast<uint64_t>(i));

        double d_p = rng.uniform(spec.distance_min, spec.distance_max);
        double d_s = std::clamp(d_p + rng.uniform(0.3, 1.1), spec.distance_min, spec.distance_max);

        double sy_min = spec.wide_variation ? -1.5 : spec.sign_y_min;
        double sy_max = spec.wide_variation ? -0.3 : spec.sign_y_max;
        double y_s = rng.uniform(sy_min, sy_max);
        y_s = std::copysign(std::min(std::abs(y_s), 0.6 * d_s), y_s);
        double x_s = std::sqrt(std::max(d_s * d_s - y_s * y_s, 1e-6));
        Pose2D sign_pose{x_s, y_s, wrap_angle(std::atan2(-y_s, -x_s))};

        SceneConfig cfg_frame = config;
        Pose2D patch_pose;
        if (layout == Layout::Intersection) {
            double lo = spec.wide_variation ? -2.0 : spec.intersection_sweep_min;
            double hi = spec.wide_variation ? 1.2 : spec.intersection_sweep_max;
            double y_p = rng.uniform(lo, hi);
            y_p = std::copysign(std::min(std::abs(y_p), 0.7 * d_p), y_p == 0.0 ? 1.0 : y_p);
            double x_p = std::sqrt(std::max(d_p * d_p - y_p * y_p, 1e-6));
            patch_pose = {x_p, y_p, wrap_angle(-kPi / 2 + rng.normal(0.0, 0.06))};
            cfg_frame.screen_mount_angle = -kPi / 2;
        } else {
            double lo = spec.wide_variation ? 0.05 : spec.lane_offset_min;
            double hi = spec.wide_variation ? 1.3 : spec.lane_offset_max;
            double y_p = rng.uniform(lo, hi);
            y_p = std::min(y_p, 0.7 * d_p);
            double x_p = std::sqrt(std::max(d_p * d_p - y_p * y_p, 1e-6));
            patch_pose = {x_p, y_p, wrap_angle(rng.normal(0.0, 0.05))};
            cfg_frame.screen_mount_angle = kPi;
        }

        int sign_class = spec.fixed_sign_class;
        if (sign_class < 0) {
            size_t pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(config.sign_classes.size()) - 1));
            sign_class = config.sign_classes[pick];
        }

        manifest.frames[static_cast<size_t>(i)] =
            render_frame(cfg_frame, frame_seed, Pose2D{0, 0, 0}, patch_pose, sign_pose, sign_class);
    });
    return manifest;
}

std::vector<ScreenPair> generate_screen_pairs(const SceneConfig& config, int n_pairs, uint64_t seed) {
    config.validate();
    if (n_pairs < 0) throw ValidationError("screen pairs: n_pairs must be >= 0");
    std::vector<ScreenPair> pairs(static_cast<size_t>(n_pairs));
    const int res = config.screen_resolution;
    parallel_for(n_pairs, [&](int64_t i) {
        Rng rng(derive_seed(seed, "pair", static_cast<uint64_t>(i)));
        Image disp(res, res);
        uint64_t ns = rng.next_u64();
        double fr = rng.uniform(0.04, 0.12);
        double base[3] = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
        double span[3] = {rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)};
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                for (int c = 0; c < 3; ++c) {
                    double n = fbm2(fr * x + 11.0 * c, fr * y - 7.0 * c, ns);
                    disp.at(y, x, c) = std::clamp(base[c] + span[c] * (n - 0.5), 0.0, 1.0);
                }
        // hard-edged shapes for contrast coverage
        int n_shapes = static_cast<int>(rng.uniform_int(2, 5));
        for (int s = 0; s < n_shapes; ++s) {
            double r = rng.uniform(0.0, 1.0), g = rng.uniform(0.0, 1.0), b = rng.uniform(0.0, 1.0);
            if (s == 0) r = g = b = rng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;  // force range extremes
            int w = static_cast<int>(rng.uniform_int(res / 8, res / 2));
            int h = static_cast<int>(rng.uniform_int(res / 8, res / 2));
            int x0 = static_cast<int>(rng.uniform_int(0, res - 1 - w));
            int y0 = static_cast<int>(rng.uniform_int(0, res - 1 - h));
            bool circle = rng.uniform() < 0.4;
            for (int y = y0; y < y0 + h; ++y)
                for (int x = x0; x < x0 + w; ++x) {
                    if (circle) {
                        double dx = (x - x0 - 0.5 * w) / (0.5 * w), dy = (y - y0 - 0.5 * h) / (0.5 * h);
                        if (dx * dx + dy * dy > 1.0) continue;
                    }
                    disp.set(y, x, r, g, b);
                }
        }
        quantize8(disp);
        PhotometricModel m = config.photometric.with_seed(derive_seed(seed, "pair-noise", static_cast<uint64_t>(i)));
        Image cap = apply_photometric(m, disp);
        quantize8(cap);
        pairs[static_cast<size_t>(i)] = {Image8::from(disp), Image8::from(cap)};
    });
    return pairs;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

ordered_json pose_json(const Pose2D& p) { return ordered_json{p.x, p.y, p.heading}; }
Pose2D pose_from(const ordered_json& j) { return {j.at(0), j.at(1), j.at(2)}; }

ordered_json box_json(const BBox& b) { return ordered_json{b.x_min, b.y_min, b.x_max, b.y_max}; }
BBox box_from(const ordered_json& j) { return {j.at(0), j.at(1), j.at(2), j.at(3)}; }

ordered_json quad_json(const Quad& q) {
    ordered_json out = ordered_json::array();
    for (const auto& p : q.corners) out.push_back(ordered_json{p.x, p.y});
    return out;
}

Quad quad_from(const ordered_json& j) {
    Quad q;
    for (int i = 0; i < 4; ++i) {
        q.corners[static_cast<size_t>(i)] = {j.at(static_cast<size_t>(i)).at(0), j.at(static_cast<size_t>(i)).at(1)};
    }
    return q;
}

}  // namespace

void save_dataset(const DatasetManifest& manifest, const std::string& dir, bool write_images) {
    if (write_images)
        fs::create_directories(fs::path(dir) / "images");
    else
        fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / "manifest.jsonl", std::ios::trunc);
    if (!out) throw IoError("dataset: cannot write manifest in " + dir);
    ordered_json header{{"format", "dynpatch-dataset"},
                        {"version", 1},
                        {"image_side", manifest.image_side},
                        {"seed", manifest.seed},
                        {"count", manifest.frames.size()}};
    out << header.dump() << "\n";
    for (size_t i = 0; i < manifest.frames.size(); ++i) {
        const FrameRecord& f = manifest.frames[i];
        std::string name;
        if (write_images) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "images/%06zu.png", i);
            name = buf;
            write_png((fs::path(dir) / name).string(), f.image.to_image());
        } else {
            if (f.image_path.empty()) throw ValidationError("dataset: frame lacks an image path");
            name = f.image_path;
        }
        ordered_json j;
        j["image"] = name;
        j["seed"] = f.seed;
        j["camera"] = pose_json(f.camera);
        j["patch_car"] = pose_json(f.patch_car);
        j["sign"] = pose_json(f.sign);
        j["recorded_camera"] = pose_json(f.recorded_camera);
        j["recorded_patch_car"] = pose_json(f.recorded_patch_car);
        j["recorded_sign"] = pose_json(f.recorded_sign);
        j["mount_angle"] = f.mount_angle;
        j["sign_class"] = class_name(f.sign_class);
        j["sign_visible"] = f.sign_visible;
        if (f.sign_visible) j["sign_box"] = box_json(f.sign_box);
        j["screen_visible"] = f.screen_visible;
        if (f.screen_visible) j["screen_quad"] = quad_json(f.screen_quad);
        j["car_visible"] = f.car_visible;
        if (f.car_visible) j["car_box"] = box_json(f.car_box);
        if (f.cluster_id >= 0) j["cluster"] = f.cluster_id;
        out << j.dump() << "\n";
    }
}

DatasetManifest load_dataset(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.jsonl");
    if (!in) throw IoError("dataset: cannot open manifest in " + dir);
    std::string line;
    if (!std::getline(in, line)) throw IoError("dataset: empty manifest in " + dir);
    ordered_json header = ordered_json::parse(line);
    if (header.value("format", "") != "dynpatch-dataset")
        throw IoError("dataset: unexpected manifest format in " + dir);
    DatasetManifest manifest;
    manifest.image_side = header.at("image_side");
    manifest.seed = header.at("seed");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        FrameRecord f;
        f.image_path = j.at("image").get<std::string>();
        f.image = Image8::from(read_png((fs::path(dir) / f.image_path).string()));
        f.seed = j.at("seed");
        f.camera = pose_from(j.at("camera"));
        f.patch_car = pose_from(j.at("patch_car"));
        f.sign = pose_from(j.at("sign"));
        f.recorded_camera = pose_from(j.at("recorded_camera"));
        f.recorded_patch_car = pose_from(j.at("recorded_patch_car"));
        f.recorded_sign = pose_from(j.at("recorded_sign"));
        f.mount_angle = j.at("mount_angle");
        f.sign_class = class_id(j.at("sign_class"));
        f.sign_visible = j.at("sign_visible");
        if (f.sign_visible) f.sign_box = box_from(j.at("sign_box"));
        f.screen_visible = j.at("screen_visible");
        if (f.screen_visible) f.screen_quad = quad_from(j.at("screen_quad"));
        f.car_visible = j.value("car_visible", false);
        if (f.car_visible) f.car_box = box_from(j.at("car_box"));
        f.cluster_id = j.value("cluster", -1);
        manifest.frames.push_back(std::move(f));
    }
    return manifest;
}

void save_screen_pairs(const std::vector<ScreenPair>& pairs, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "displayed");
    fs::create_directories(fs::path(dir) / "captured");
    std::ofstream out(fs::path(dir) / "pairs.jsonl", std::ios::trunc);
    if (!out) throw IoError("screen pairs: cannot write manifest in " + dir);
    ordered_json header{{"format", "dynpatch-screen-pairs"}, {"version", 1}, {"count", pairs.size()}};
    out << header.dump() << "\n";
    for (size_t i = 0; i < pairs.size(); ++i) {
        char d[32], c[32];
        std::snprintf(d, sizeof(d), "displayed/%05zu.png", i);
        std::snprintf(c, sizeof(c), "captured/%05zu.png", i);
        write_png((fs::path(dir) / d).string(), pairs[i].displayed.to_image());
        write_png((fs::path(dir) / c).string(), pairs[i].captured.to_image());
        out << ordered_json{{"displayed", d}, {"captured", c}}.dump() << "\n";
    }
}

std::vector<ScreenPair> load_screen_pairs(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "pairs.jsonl");
    if (!in) throw IoError("screen pairs: cannot open manifest in " + dir);
    std::string line;
    if (!std::getline(in, line)) throw IoError("screen pairs: empty manifest in " + dir);
    ordered_json header = ordered_json::parse(line);
    if (header.value("format", "") != "dynpatch-screen-pairs")
        throw IoError("screen pairs: unexpected manifest format in " + dir);
    std::vector<ScreenPair> pairs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        ScreenPair p;
        p.displayed = Image8::from(read_png((fs::path(dir) / j.at("displayed").get<std::string>()).string()));
        p.captured = Image8::from(read_png((fs::path(dir) / j.at("captured").get<std::string>()).string()));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace dynpatch
