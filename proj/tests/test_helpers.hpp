#pragma once
#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>

#include "poisondet/coco.hpp"

// Unique scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("poisondet_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline poisondet::DetectionDataset minimal_dataset() {
    poisondet::DetectionDataset ds;
    ds.images = {{1, "img_000000.png", 64, 64}};
    ds.annotations = {{1, 1, 1, {10, 20, 16, 16}, 256, 0}};
    ds.categories = {{1, "square"}};
    return ds;
}
