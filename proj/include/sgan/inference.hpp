#pragma once

// Applying trained generators to whole images.

#include <stdexcept>
#include <string>
#include <vector>

#include "sgan/data.hpp"
#include "sgan/detector_training.hpp"
#include "sgan/generators.hpp"

namespace sgan {

enum class Direction { normal_to_adverse, adverse_to_normal };

inline Direction parse_direction(const std::string& s) {
  if (s == "normal-to-adverse") return Direction::normal_to_adverse;
  if (s == "adverse-to-normal") return Direction::adverse_to_normal;
  throw std::invalid_argument("direction must be normal-to-adverse or adverse-to-normal, got '" + s + "'");
}

template <class T>
const Generator<T>& generator_for(const GeneratorPair<T>& pair, Direction d) {
  return d == Direction::normal_to_adverse ? pair.normal_to_adverse : pair.adverse_to_normal;
}

/// Translates one image; its sides must satisfy the generator's multiple.
template <class T>
Image translate_image(const Generator<T>& g, const Image& img) {
  NoGradGuard guard;
  return tensor_to_image(g(Var<T>(image_to_tensor<T>(img))).value());
}

/// Translates every image of `ds`, carrying its labels over unchanged.
template <class T>
std::vector<LabelledImage> translate_labelled(const Generator<T>& g, const DomainDataset& ds,
                                              std::size_t limit = static_cast<std::size_t>(-1)) {
  std::vector<LabelledImage> out;
  for (std::size_t i = 0; i < ds.size() && i < limit; ++i) {
    const Sample& s = ds.sample(i);
    if (!s.labels) throw std::invalid_argument("image " + s.name + " has no labels to inherit");
    out.push_back({translate_image(g, ds.image(i)), *s.labels});
  }
  return out;
}

}  // namespace sgan
