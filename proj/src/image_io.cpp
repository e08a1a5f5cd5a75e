#include "sgan/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace sgan {

Image read_image(const fs::path& p) {
  cv::Mat m = cv::imread(p.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw std::runtime_error("cannot decode image " + p.string());
  cv::Mat rgb;
  cv::cvtColor(m, rgb, cv::COLOR_BGR2RGB);
  Image img(rgb.cols, rgb.rows);
  for (int y = 0; y < rgb.rows; ++y)
    std::copy_n(rgb.ptr<std::uint8_t>(y), static_cast<std::size_t>(rgb.cols) * 3,
                &img.rgb[static_cast<std::size_t>(y) * img.width * 3]);
  return img;
}

void write_image(const fs::path& p, const Image& img) {
  cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.rgb.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(p.string(), bgr)) throw std::runtime_error("cannot write image " + p.string());
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

DomainDataset load_domain(const fs::path& root, const std::string& split, Domain domain,
                          bool labels_required) {
  const fs::path dir = root / split;
  if (!fs::exists(dir)) throw std::runtime_error("dataset split not found: " + dir.string());
  const fs::path label_dir = root / "labels" / split;
  std::vector<Sample> samples;
  for (const auto& p : list_images(dir)) {
    Sample s{p.stem().string(), p, nullptr, std::nullopt};
    const fs::path lp = label_dir / (s.name + ".txt");
    if (fs::exists(lp))
      s.labels = read_labels(lp);
    else if (labels_required)
      throw std::runtime_error("missing label file " + lp.string());
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw std::runtime_error("no images in " + dir.string());
  return DomainDataset(root, domain, std::move(samples), read_image);
}

void write_domain(const fs::path& root, const std::string& split, const DomainDataset& ds) {
  fs::create_directories(root / split);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample& s = ds.sample(i);
    write_image(root / split / (s.name + ".png"), ds.image(i));
    if (s.labels) {
      fs::create_directories(root / "labels" / split);
      write_labels(root / "labels" / split / (s.name + ".txt"), *s.labels);
    }
  }
}

nlohmann::ordered_json write_dataset_manifest(const fs::path& root) {
  nlohmann::ordered_json splits = nlohmann::ordered_json::object();
  for (const char* split : {"trainA", "trainB", "testA", "testB"}) {
    if (!fs::is_directory(root / split)) continue;
    const auto images = list_images(root / split);
    std::size_t labelled = 0;
    for (const auto& p : images)
      labelled += fs::exists(root / "labels" / split / (p.stem().string() + ".txt"));
    splits[split] = {{"images", images.size()}, {"labelled", labelled}};
  }
  nlohmann::ordered_json m = {{"format", "sgan-dataset-v1"}, {"splits", splits}};
  std::ofstream(root / "manifest.json") << m.dump(2) << '\n';
  return m;
}

}  // namespace sgan
