#pragma once

#include <string>
#include <vector>

namespace streamtts {

// Mono 16-bit PCM little-endian WAV.
void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate);
std::vector<float> read_wav(const std::string& path, int* sample_rate_out = nullptr);

}  // namespace streamtts
