#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynpatch {

// Exit-code categories used by the CLI. Library code throws; the CLI maps.
enum class ErrorCategory : int {
    Other = 1,
    Validation = 2,
    Dependency = 3,
    Io = 4,
};

class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A pipeline stage was asked to run before its inputs exist. Carries the
// name of the stage that would produce the missing artifact.
class DependencyError : public std::runtime_error {
public:
    DependencyError(const std::string& msg, std::string required_stage)
        : std::runtime_error(msg), required_stage_(std::move(required_stage)) {}
    const std::string& required_stage() const { return required_stage_; }

private:
    std::string required_stage_;
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a 64-bit. Used for artifact/content hashes in run manifests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

std::string hash_to_hex(uint64_t h);
uint64_t hash_file(const std::string& path);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// processed exactly once; callers own any ordering of result reduction.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn, int threads = 0);

// Process-wide default worker count (0 = hardware concurrency).
void set_default_threads(int threads);
int default_threads();

}  // namespace dynpatch
