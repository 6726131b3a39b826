#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dynpatch/geometry.hpp"
#include "dynpatch/image.hpp"

namespace dynpatch {

// Class ids shared by the simulator and the detector.
// 0..3 are sign classes, 4 is the patch-carrying car.
enum : int {
    kClassStop = 0,
    kClassGoStraight = 1,
    kClassTurn = 2,
    kClassPedestrian = 3,
    kClassCar = 4,
    kNumClasses = 5,
};

const char* class_name(int id);
int class_id(const std::string& name);  // throws ValidationError on unknown names

// Compact 8-bit image for datasets held in memory.
struct Image8 {
    int width = 0, height = 0;
    std::vector<uint8_t> px;  // interleaved rgb

    static Image8 from(const Image& img);
    Image to_image() const;
    bool operator==(const Image8&) const = default;
};

// Pose in the camera-car ground plane. x forward, y left, heading in [-pi, pi).
struct Pose2D {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0;

    double distance_to(const Pose2D& o) const;
    void validate(const char* who = "pose") const;
};

double wrap_angle(double a);  // into [-pi, pi)

// Expresses a world pose in the frame of `camera` (x forward, y left).
Pose2D to_camera_frame(const Pose2D& p, const Pose2D& camera);

// Ground-truth display-to-capture transform: gain/bias, then gamma, then
// blur, then seeded noise, then clip to [0,1].
struct PhotometricModel {
    std::array<double, 3> gain{1.0, 1.0, 1.0};
    std::array<double, 3> bias{0.0, 0.0, 0.0};
    double gamma = 1.0;
    double blur_radius = 0.0;  // gaussian sigma, pixels
    double noise_amplitude = 0.0;
    uint64_t seed = 0;

    void validate() const;
    bool is_identity() const;
    PhotometricModel with_seed(uint64_t s) const {
        PhotometricModel m = *this;
        m.seed = s;
        return m;
    }
};

Image apply_photometric(const PhotometricModel& model, const Image& image);

struct SceneConfig {
    int image_side = 256;
    std::vector<int> sign_classes{kClassStop, kClassGoStraight, kClassTurn, kClassPedestrian};
    double focal_px = 230.0;
    double camera_height = 0.16;  // meters above ground
    double near_plane = 0.15;

    // patch car body
    double car_length = 0.42, car_width = 0.26, car_height = 0.22;

    // display screen mounted on the patch car
    double screen_width = 0.40, screen_height = 0.26;
    double screen_bottom = 0.06;        // z of lower edge
    double screen_mount_angle = 3.14159265358979323846;  // normal relative to heading; pi = rear
    double screen_standoff = 0.02;      // offset outward from the body shell
    int screen_resolution = 64;         // native texel grid (square)

    double sign_size = 0.45;   // square board edge
    double sign_bottom = 0.26; // z of board lower edge

    std::array<double, 3> calibration_blue{0.0, 0.2, 1.0};  // exact on the 8-bit grid

    uint64_t background_seed = 1;
    double pose_noise_sigma = 0.02;      // recorded-pose noise, meters
    double heading_noise_sigma = 0.01;   // radians

    PhotometricModel photometric;

    void validate() const;
};

SceneConfig default_scene_config();

// One synchronized observation.
struct FrameRecord {
    Image8 image;
    Pose2D camera, patch_car, sign;                       // drives rendering
    Pose2D recorded_camera, recorded_patch_car, recorded_sign;  // SLAM analog (noisy)
    double mount_angle = 3.14159265358979323846;
    bool screen_visible = false;
    Quad screen_quad{};
    bool sign_visible = false;
    BBox sign_box{};
    int sign_class = kClassGoStraight;
    bool car_visible = false;
    BBox car_box{};
    uint64_t seed = 0;
    int cluster_id = -1;  // -1 until clustering
    std::string image_path;  // set when persisted
};

// Projection of the physical screen; nullopt when back-facing, behind the
// camera, or out of frame. Mount angle comes from the config.
std::optional<Quad> screen_quad(const Pose2D& camera, const Pose2D& patch_car,
                                const SceneConfig& config);

// Deterministic frame render. With no patch the screen shows the solid
// calibration blue; with a patch the ground-truth photometric model (seeded
// per frame) is applied before warping onto the quad.
FrameRecord render_frame(const SceneConfig& config, uint64_t seed, const Pose2D& camera,
                         const Pose2D& patch_car, const Pose2D& sign_pose, int sign_class,
                         const Image* patch = nullptr);

// Ground-truth composite of a patch onto an already rendered frame. Equals
// render_frame with the patch supplied, pixel for pixel.
Image apply_patch_to_frame(const FrameRecord& record, const Image& patch, const SceneConfig& config);

enum class Layout { Intersection, LaneChange };

struct TrajectorySpec {
    std::vector<Layout> layouts{Layout::Intersection, Layout::LaneChange};
    double distance_min = 1.8;  // meters, camera to either subject
    double distance_max = 6.5;
    int fixed_sign_class = -1;  // -1: sample uniformly from config.sign_classes
    // lateral placement ranges (meters, +y is left)
    double sign_y_min = -0.95, sign_y_max = -0.5;
    double intersection_sweep_min = -1.25, intersection_sweep_max = 0.35;
    double lane_offset_min = 0.25, lane_offset_max = 0.6;
    bool wide_variation = false;  // detector-training variety (wider lateral ranges)
};

struct DatasetManifest {
    int image_side = 0;
    uint64_t seed = 0;
    std::vector<FrameRecord> frames;
};

DatasetManifest generate_driving_dataset(const SceneConfig& config, const TrajectorySpec& spec,
                                         int n_frames, uint64_t seed);

struct ScreenPair {
    Image8 displayed;
    Image8 captured;
};

std::vector<ScreenPair> generate_screen_pairs(const SceneConfig& config, int n_pairs, uint64_t seed);

// Procedural sign face texture (square). Exposed for label-soundness checks.
Image make_sign_texture(int sign_class, int resolution);

// Dataset persistence: dir/manifest.jsonl (versioned header line + one JSON
// object per frame) and dir/images/*.png. With write_images = false only the
// manifest is written and each frame's existing image_path is kept (used by
// the clustering stage, whose manifests point back at the source images).
void save_dataset(const DatasetManifest& manifest, const std::string& dir, bool write_images = true);
DatasetManifest load_dataset(const std::string& dir);

void save_screen_pairs(const std::vector<ScreenPair>& pairs, const std::string& dir);
std::vector<ScreenPair> load_screen_pairs(const std::string& dir);

}  // namespace dynpatch
