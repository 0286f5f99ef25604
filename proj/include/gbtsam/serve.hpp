#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbtsam/model.hpp"
#include "gbtsam/volume.hpp"

namespace gbtsam {

// Alternating run lengths over a row-major binary mask, starting with the
// run of zeros (which may be 0).
std::vector<std::uint32_t> rle_encode(std::span<float const> binary);
// Throws when the runs do not sum to `expected`.
std::vector<float> rle_decode(std::span<std::uint32_t const> runs, std::size_t expected);

// 8-bit grayscale PNG, filter type 0 on every row.
std::string encode_png_gray(std::span<std::uint8_t const> pixels, std::size_t width, std::size_t height);
// Min-max window to [0, 255]; a constant slice maps to 128.
std::vector<std::uint8_t> window_to_u8(std::span<float const> slice);

struct HttpResult {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

// Request handlers, independent of the HTTP transport. Thread-safe: the
// model is read-only and the volume cache takes a shared lock for reads.
class SegmentService {
  public:
    SegmentService(SamModel model, std::string checkpoint_id, double threshold = 0.5);

    HttpResult healthz() const;
    HttpResult upload(std::string const& header_json, std::string const& payload);
    HttpResult volume_metadata(std::string const& id) const;
    HttpResult slice_png(std::string const& id, std::string const& depth, std::string const& modality) const;
    HttpResult segment(std::string const& body) const;

    std::string const& checkpoint_id() const { return checkpoint_id_; }

  private:
    struct CachedVolume {
        nlohmann::json header;
        Volume raw;
        Volume normalized;
    };
    std::shared_ptr<CachedVolume const> find(std::string const& id) const;

    SamModel model_;
    std::string checkpoint_id_;
    double threshold_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<CachedVolume const>> volumes_;
};

// HTTP transport for a SegmentService: bind(), then listen() blocks until
// stop() is called from another thread.
class HttpServer {
  public:
    explicit HttpServer(SegmentService& service, std::size_t threads = 4);
    ~HttpServer();
    HttpServer(HttpServer const&) = delete;
    HttpServer& operator=(HttpServer const&) = delete;

    // Binds (port 0 picks a free port) and returns the port; then call listen().
    int bind(std::string const& host, int port);
    void listen();
    void stop();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace gbtsam
