#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "graspcap/sfm.hpp"

namespace graspcap::sfm {

using nlohmann::json;

FrameDetections load_keypoint_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, path + ": " + e.what());
  }
  if (!doc.is_array() || doc.size() != hand::kNumLandmarks) {
    throw Error(ErrorKind::ParseError, path + ": expected an array of 21 [u, v, c] entries");
  }
  FrameDetections frame;
  for (int i = 0; i < hand::kNumLandmarks; ++i) {
    const json& e = doc[static_cast<std::size_t>(i)];
    if (!e.is_array() || e.size() != 3 || !e[0].is_number() || !e[1].is_number() ||
        !e[2].is_number()) {
      throw Error(ErrorKind::ParseError, path + ": landmark " + std::to_string(i) + " is not [u, v, c]");
    }
    frame[i].pixel = {e[0].get<double>(), e[1].get<double>()};
    frame[i].confidence = e[2].get<double>();
  }
  return frame;
}

void save_keypoint_file(const std::string& path, const FrameDetections& detections) {
  json doc = json::array();
  for (const auto& d : detections) doc.push_back({d.pixel.x(), d.pixel.y(), d.confidence});
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write " + path);
  out << doc.dump() << '\n';
}

ObservationSet load_observations(const std::string& keypoint_dir, const CameraIntrinsics& K) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(keypoint_dir, ec)) {
    throw Error(ErrorKind::ConfigError, "keypoint directory not found: " + keypoint_dir);
  }
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(keypoint_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  ObservationSet obs;
  obs.intrinsics = K;
  for (const auto& f : files) obs.frames.push_back(load_keypoint_file(f));
  obs.validate();
  return obs;
}

}  // namespace graspcap::sfm
