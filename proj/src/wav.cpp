#include "streamtts/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "streamtts/errors.hpp"

namespace streamtts {

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u16(std::ofstream& f, uint16_t v) {
    f.write(reinterpret_cast<const char*>(&v), 2);
}

int16_t to_pcm16(float x) {
    float c = std::clamp(x, -1.0f, 1.0f);
    return static_cast<int16_t>(std::lround(c * 32767.0f));
}

}  // namespace

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write wav: " + path);
    uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
    f.write("RIFF", 4);
    put_u32(f, 36 + data_bytes);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    put_u32(f, 16);
    put_u16(f, 1);  // PCM
    put_u16(f, 1);  // mono
    put_u32(f, static_cast<uint32_t>(sample_rate));
    put_u32(f, static_cast<uint32_t>(sample_rate * 2));
    put_u16(f, 2);
    put_u16(f, 16);
    f.write("data", 4);
    put_u32(f, data_bytes);
    for (float s : samples) {
        int16_t v = to_pcm16(s);
        f.write(reinterpret_cast<const char*>(&v), 2);
    }
    if (!f) throw IoError("short write: " + path);
}

std::vector<float> read_wav(const std::string& path, int* sample_rate_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read wav: " + path);
    char hdr[44];
    f.read(hdr, 44);
    if (!f || std::memcmp(hdr, "RIFF", 4) != 0 || std::memcmp(hdr + 8, "WAVE", 4) != 0)
        throw ParseError("not a wav file: " + path);
    uint16_t channels, bits;
    uint32_t rate, data_bytes;
    std::memcpy(&channels, hdr + 22, 2);
    std::memcpy(&rate, hdr + 24, 4);
    std::memcpy(&bits, hdr + 34, 2);
    std::memcpy(&data_bytes, hdr + 40, 4);
    if (channels != 1 || bits != 16) throw ParseError("expected mono 16-bit wav: " + path);
    if (sample_rate_out) *sample_rate_out = static_cast<int>(rate);
    std::vector<float> out(data_bytes / 2);
    for (auto& s : out) {
        int16_t v;
        f.read(reinterpret_cast<char*>(&v), 2);
        s = static_cast<float>(v) / 32767.0f;
    }
    if (!f) throw ParseError("truncated wav: " + path);
    return out;
}

}  // namespace streamtts
