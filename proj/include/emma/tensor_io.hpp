#pragma once

#include <string>
#include <vector>

namespace emma {

// Raw tensor blob for file exchange. Payload is float32 on disk ("EMT1":
// magic, uint32 rank, rank x uint32 dims, little-endian float32 row-major).
struct TensorBlob {
    std::vector<unsigned int> dims;
    std::vector<float> values;
};

void save_tensor(const TensorBlob& blob, const std::string& path);
TensorBlob load_tensor(const std::string& path);

}  // namespace emma
