#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "anatembed/phantom.hpp"
#include "anatembed/tensor_io.hpp"
#include "json.hpp"

namespace anatembed::phantom {

inline void save_phantom(const std::string& dir, const Phantom& ph) {
  std::filesystem::create_directories(dir);
  io::write_pet(dir + "/image.pet", ph.size, ph.image);
  Shape cshape = {ph.dim};
  cshape.insert(cshape.end(), ph.size.begin(), ph.size.end());
  io::write_pet(dir + "/coords.pet", cshape, ph.coord_field);
  io::write_pet(dir + "/body.pet", ph.size, ph.body_mask);
  nlohmann::json meta;
  meta["format"] = "anatembed-phantom-v1";
  meta["dim"] = ph.dim;
  meta["seed"] = ph.seed;
  meta["size"] = ph.size;
  meta["spacing"] = ph.spacing;
  meta["variation"] = ph.variation;
  meta["layout_hash"] = strcat(ph.layout_hash);
  nlohmann::json lms = nlohmann::json::array();
  for (const Landmark& lm : ph.landmarks)
    lms.push_back({{"name", lm.name}, {"position_px", lm.position_px}});
  meta["landmarks"] = lms;
  io::write_text_atomic(dir + "/meta.json", meta.dump(2) + "\n");
}

inline Phantom load_phantom(const std::string& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(dir + "/meta.json"));
  } catch (const nlohmann::json::exception& e) {
    fail("phantom: cannot parse ", dir, "/meta.json: ", e.what());
  }
  require(meta.value("format", "") == "anatembed-phantom-v1",
          "phantom: ", dir, "/meta.json has unknown format tag");
  Phantom ph;
  ph.dim = meta.at("dim").get<int>();
  ph.seed = meta.at("seed").get<uint64_t>();
  ph.size = meta.at("size").get<Shape>();
  ph.spacing = meta.at("spacing").get<VecD>();
  ph.variation = meta.at("variation").get<double>();
  ph.layout_hash = std::stoull(meta.at("layout_hash").get<std::string>());
  for (const auto& lm : meta.at("landmarks"))
    ph.landmarks.push_back(
        {lm.at("name").get<std::string>(), lm.at("position_px").get<VecD>()});

  auto [ishape, image] = io::read_pet_f32(dir + "/image.pet");
  require(ishape == ph.size, "phantom: ", dir, "/image.pet shape ",
          shape_str(ishape), " does not match meta size ", shape_str(ph.size));
  ph.image = std::move(image);
  auto [cshape, coords] = io::read_pet_f32(dir + "/coords.pet");
  Shape expect = {ph.dim};
  expect.insert(expect.end(), ph.size.begin(), ph.size.end());
  require(cshape == expect, "phantom: ", dir, "/coords.pet shape ",
          shape_str(cshape), " does not match ", shape_str(expect));
  ph.coord_field = std::move(coords);
  auto [bshape, body] = io::read_pet_u8(dir + "/body.pet");
  require(bshape == ph.size, "phantom: ", dir, "/body.pet shape mismatch");
  ph.body_mask = std::move(body);
  return ph;
}

inline std::string phantom_dir_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom_%04lld", (long long)index);
  return buf;
}

// Loads every phantom_NNNN subdirectory in ascending order and checks that
// the set is mutually consistent (same dim, layout and landmark names).
inline std::vector<Phantom> load_dataset(const std::string& root) {
  std::vector<std::string> dirs;
  require(std::filesystem::is_directory(root), "phantom: ", root,
          " is not a directory");
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("phantom_", 0) == 0)
      dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  require(!dirs.empty(), "phantom: no phantom_NNNN directories under ", root);
  std::vector<Phantom> out;
  for (const std::string& d : dirs) out.push_back(load_phantom(d));
  for (const Phantom& ph : out) {
    require(ph.dim == out[0].dim, "phantom: mixed dims in dataset ", root);
    require(ph.layout_hash == out[0].layout_hash,
            "phantom: mixed layouts in dataset ", root);
    require(ph.landmarks.size() == out[0].landmarks.size(),
            "phantom: inconsistent landmark count in dataset ", root);
    for (size_t i = 0; i < ph.landmarks.size(); ++i)
      require(ph.landmarks[i].name == out[0].landmarks[i].name,
              "phantom: inconsistent landmark names in dataset ", root);
  }
  return out;
}

}  // namespace anatembed::phantom
