#pragma once

#include <string>
#include <utility>

#include "lesionkit/core.hpp"

namespace lesionkit {

// Raster file support: 8-bit PNG (via libpng), binary PGM (P5) and PPM (P6).
// Masks are written as single-channel rasters with values 0/255; on read any
// nonzero sample counts as set.

FundusImage load_image(const std::string& path);
void save_image(const FundusImage& img, const std::string& path);

BinaryMask load_mask(const std::string& path);
void save_mask(const BinaryMask& mask, const std::string& path);

// Reads only the header. Throws ParseError on unknown or corrupt files.
std::pair<int, int> probe_raster_dims(const std::string& path);

}  // namespace lesionkit
