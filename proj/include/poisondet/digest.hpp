#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace poisondet {

// Incremental SHA-256; enough hashing for manifests and run records,
// no external dependency.
class Sha256 {
public:
    Sha256() { reset(); }
    void reset();
    void update(const void* data, std::size_t len);
    void update(std::string_view s) { update(s.data(), s.size()); }
    // Finalizes and returns lowercase hex. The object must be reset() before reuse.
    std::string hex_digest();

private:
    void process_block(const std::uint8_t* block);
    std::uint32_t state_[8];
    std::uint64_t total_len_ = 0;
    std::uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

// Digest over every regular file under root: sha256 of the sorted list of
// "<relative path>\n<file digest>\n" entries. Stable across traversal order.
std::string sha256_tree(const std::filesystem::path& root);

}  // namespace poisondet
