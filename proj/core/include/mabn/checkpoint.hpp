#pragma once

#include <string>

#include "mabn/model.hpp"

namespace mabn {

/// Structured binary checkpoint: magic "MABN", format version, layer
/// manifest (op kinds, shapes), little-endian 64-bit parameter buffers
/// including running statistics and mode flags, trailing CRC-32.
/// save/load roundtrips are bit-exact.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace mabn
