#pragma once

#include "distilseg/volume.hpp"

namespace distilseg {

// Global Pearson correlation of voxel intensities, in [-1, 1].
// Throws DegenerateInputError when both volumes are constant; returns 0 when exactly one is.
double ncc_score(const Volume& a, const Volume& b);

}  // namespace distilseg
