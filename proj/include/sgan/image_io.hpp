#pragma once

// Image files (PNG/JPEG via OpenCV, compiled into sgan_io) and the on-disk
// dataset layout:
//   root/{trainA,trainB,testA,testB}/<stem>.png
//   root/labels/<split>/<stem>.txt
//   root/manifest.json

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgan/data.hpp"

namespace sgan {

namespace fs = std::filesystem;

Image read_image(const fs::path& p);
void write_image(const fs::path& p, const Image& img);
bool is_image_file(const fs::path& p);

/// Image files directly inside `dir`, sorted by filename.
std::vector<fs::path> list_images(const fs::path& dir);

/// Loads `root/split` lazily; labels are taken from `root/labels/split` when
/// present. `labels_required` enforces a label file for every image.
DomainDataset load_domain(const fs::path& root, const std::string& split, Domain domain,
                          bool labels_required = false);

/// Writes every sample of `ds` as PNG under `root/split` (plus labels).
void write_domain(const fs::path& root, const std::string& split, const DomainDataset& ds);

/// Split names with image and label counts, written to root/manifest.json.
nlohmann::ordered_json write_dataset_manifest(const fs::path& root);

}  // namespace sgan
