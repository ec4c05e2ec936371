#pragma once

// Trigger files: <stem>.u8 holds the pattern bytes (same encoding as
// datasets) and <stem>.json the geometry:
//   {"placement": "patch" | "full_image", "row", "col", "blend_alpha",
//    "channels", "height", "width"}

#include <filesystem>
#include <string>

#include "bsift/attacks.hpp"
#include "bsift/bundle_io.hpp"

namespace bsift {

inline void save_trigger(const TriggerSpec& t, const fs::path& json_path) {
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  fs::path raw = json_path;
  raw.replace_extension(".u8");
  const ImageShape& s = t.pattern.shape;
  write_json(json_path, {{"placement", t.placement.kind == PlacementKind::Patch ? "patch" : "full_image"},
                         {"row", t.placement.row},
                         {"col", t.placement.col},
                         {"blend_alpha", t.blend_alpha},
                         {"channels", s.channels},
                         {"height", s.height},
                         {"width", s.width},
                         {"pattern", raw.filename().string()}});
  write_u8(raw, t.pattern.data);
}

inline TriggerSpec load_trigger(const fs::path& json_path) {
  const auto meta = read_json(json_path);
  const std::string file = json_path.filename().string();
  TriggerSpec t;
  const auto placement = detail::meta_field<std::string>(meta, file, "placement");
  if (placement == "patch") {
    t.placement.kind = PlacementKind::Patch;
  } else if (placement == "full_image") {
    t.placement.kind = PlacementKind::FullImage;
  } else {
    throw FormatError(file + ":placement", "expected \"patch\" or \"full_image\", got \"" + placement + "\"");
  }
  t.placement.row = meta.contains("row") ? detail::meta_field<std::size_t>(meta, file, "row") : 0;
  t.placement.col = meta.contains("col") ? detail::meta_field<std::size_t>(meta, file, "col") : 0;
  t.blend_alpha = detail::meta_field<double>(meta, file, "blend_alpha");
  ImageShape shape{detail::meta_field<std::size_t>(meta, file, "channels"),
                   detail::meta_field<std::size_t>(meta, file, "height"),
                   detail::meta_field<std::size_t>(meta, file, "width")};
  fs::path raw = json_path;
  if (meta.contains("pattern")) {
    raw = json_path.parent_path() / detail::meta_field<std::string>(meta, file, "pattern");
  } else {
    raw.replace_extension(".u8");
  }
  t.pattern = Image(shape);
  t.pattern.data = read_u8(raw, shape.size());
  return t;
}

}  // namespace bsift
