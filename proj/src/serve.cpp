#include "gbtsam/serve.hpp"

#include <algorithm>
#include <chrono>
#include <mutex>

#include <httplib.h>
#include <zlib.h>

#include "gbtsam/error.hpp"
#include "gbtsam/eval.hpp"

namespace gbtsam {

using nlohmann::json;

std::vector<std::uint32_t> rle_encode(std::span<float const> binary) {
    std::vector<std::uint32_t> runs;
    float current = 0.0f;
    std::uint32_t run = 0;
    for (float v : binary) {
        if (v != 0.0f && v != 1.0f) {
            throw Error("rle_encode: mask is not binary");
        }
        if (v != current) {
            runs.push_back(run);
            run = 0;
            current = v;
        }
        ++run;
    }
    runs.push_back(run);
    return runs;
}

std::vector<float> rle_decode(std::span<std::uint32_t const> runs, std::size_t expected) {
    std::vector<float> out;
    out.reserve(expected);
    float value = 0.0f;
    for (std::uint32_t r : runs) {
        if (out.size() + r > expected) {
            throw Error("rle_decode: runs exceed " + std::to_string(expected) + " values");
        }
        out.insert(out.end(), r, value);
        value = 1.0f - value;
    }
    if (out.size() != expected) {
        throw Error("rle_decode: runs sum to " + std::to_string(out.size()) + ", expected " +
                    std::to_string(expected));
    }
    return out;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
}

void put_chunk(std::string& out, char const* type, std::string const& data) {
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    auto const crc = crc32(0L, reinterpret_cast<Bytef const*>(body.data()), static_cast<uInt>(body.size()));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

HttpResult json_error(int status, std::string const& message) {
    return HttpResult{status, "application/json", json{{"error", message}}.dump()};
}

} // namespace

std::string encode_png_gray(std::span<std::uint8_t const> pixels, std::size_t width, std::size_t height) {
    if (pixels.size() != width * height || width == 0 || height == 0) {
        throw Error("encode_png_gray: " + std::to_string(pixels.size()) + " pixels for a " +
                    std::to_string(width) + "x" + std::to_string(height) + " image");
    }
    std::string raw;
    raw.reserve(height * (width + 1));
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.append(reinterpret_cast<char const*>(pixels.data() + y * width), width);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string deflated(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(deflated.data()), &bound, reinterpret_cast<Bytef const*>(raw.data()),
                  static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK) {
        throw Error("encode_png_gray: deflate failed");
    }
    deflated.resize(bound);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(width));
    put_u32(ihdr, static_cast<std::uint32_t>(height));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5); // 8-bit, grayscale
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", deflated);
    put_chunk(out, "IEND", "");
    return out;
}

std::vector<std::uint8_t> window_to_u8(std::span<float const> slice) {
    std::vector<std::uint8_t> out(slice.size(), 128);
    if (slice.empty()) {
        return out;
    }
    auto [lo, hi] = std::minmax_element(slice.begin(), slice.end());
    if (*hi <= *lo) {
        return out;
    }
    double const scale = 255.0 / (static_cast<double>(*hi) - static_cast<double>(*lo));
    for (std::size_t i = 0; i < slice.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(std::lround((static_cast<double>(slice[i]) - *lo) * scale));
    }
    return out;
}

// ---------------------------------------------------------------------------

SegmentService::SegmentService(SamModel model, std::string checkpoint_id, double threshold)
    : model_(std::move(model)), checkpoint_id_(std::move(checkpoint_id)), threshold_(threshold) {
    if (!(threshold_ >= 0.0 && threshold_ <= 1.0)) {
        throw ConfigError("serve threshold must lie in [0, 1]");
    }
}

HttpResult SegmentService::healthz() const {
    return HttpResult{200, "application/json", json{{"status", "ok"}, {"checkpoint_id", checkpoint_id_}}.dump()};
}

std::shared_ptr<SegmentService::CachedVolume const> SegmentService::find(std::string const& id) const {
    std::shared_lock lock(mutex_);
    auto it = volumes_.find(id);
    return it == volumes_.end() ? nullptr : it->second;
}

HttpResult SegmentService::upload(std::string const& header_json, std::string const& payload) {
    json header;
    try {
        header = json::parse(header_json);
    } catch (json::parse_error const& e) {
        return json_error(400, std::string("header is not valid JSON: ") + e.what());
    }
    std::shared_ptr<CachedVolume const> entry;
    try {
        auto raw = decode_volume(header_json, std::as_bytes(std::span(payload.data(), payload.size())));
        auto normalized = normalize(raw);
        entry = std::make_shared<CachedVolume const>(CachedVolume{header, std::move(raw), std::move(normalized)});
    } catch (Error const& e) {
        return json_error(400, e.what());
    }
    std::string const canonical = encode_volume_header(entry->raw.header()) + payload;
    std::string const id = content_hash(std::as_bytes(std::span(canonical.data(), canonical.size())));
    {
        std::unique_lock lock(mutex_);
        volumes_.try_emplace(id, entry);
    }
    auto const& h = entry->raw.header();
    return HttpResult{200, "application/json",
                      json{{"volume_id", id}, {"H", h.height}, {"W", h.width}, {"D", h.depth}}.dump()};
}

HttpResult SegmentService::volume_metadata(std::string const& id) const {
    auto v = find(id);
    if (!v) {
        return json_error(404, "unknown volume " + id);
    }
    return HttpResult{200, "application/json", json{{"volume_id", id}, {"header", v->header}}.dump()};
}

HttpResult SegmentService::slice_png(std::string const& id, std::string const& depth,
                                     std::string const& modality) const {
    auto v = find(id);
    if (!v) {
        return json_error(404, "unknown volume " + id);
    }
    std::size_t d = 0;
    try {
        std::size_t used = 0;
        d = std::stoul(depth, &used);
        if (used != depth.size()) {
            throw std::invalid_argument(depth);
        }
    } catch (std::exception const&) {
        return json_error(404, "slice index \"" + depth + "\" is not a non-negative integer");
    }
    auto const& h = v->raw.header();
    if (d >= h.depth) {
        return json_error(404, "slice " + std::to_string(d) + " outside [0, " + std::to_string(h.depth - 1) + "]");
    }
    std::size_t m = 0;
    if (!modality.empty()) {
        auto it = std::find(kModalityNames.begin(), kModalityNames.end(), modality);
        if (it != kModalityNames.end()) {
            m = static_cast<std::size_t>(it - kModalityNames.begin());
        } else {
            try {
                std::size_t used = 0;
                m = std::stoul(modality, &used);
                if (used != modality.size() || m >= kModalityCount) {
                    throw std::invalid_argument(modality);
                }
            } catch (std::exception const&) {
                return json_error(404, "unknown modality \"" + modality + "\"");
            }
        }
    }
    auto const png = encode_png_gray(window_to_u8(v->raw.slice(m, d)), h.width, h.height);
    return HttpResult{200, "image/png", png};
}

HttpResult SegmentService::segment(std::string const& body) const {
    auto const t0 = std::chrono::steady_clock::now();
    json req;
    try {
        req = json::parse(body);
    } catch (json::parse_error const& e) {
        return json_error(400, std::string("request is not valid JSON: ") + e.what());
    }
    if (!req.is_object() || !req.contains("volume_id") || !req["volume_id"].is_string() ||
        !req.contains("slice_index") || !req.contains("box")) {
        return json_error(400, "request needs volume_id (string), slice_index and box");
    }
    auto v = find(req["volume_id"].get<std::string>());
    if (!v) {
        return json_error(404, "unknown volume " + req["volume_id"].get<std::string>());
    }
    auto const& vol = v->normalized;
    std::size_t const H = vol.height();
    std::size_t const W = vol.width();
    std::size_t const D = vol.depth();
    auto const& si = req["slice_index"];
    if (!si.is_number_integer() || si.get<long long>() < 0 || static_cast<std::size_t>(si.get<long long>()) >= D) {
        return json_error(422, "slice_index must be an integer in [0, " + std::to_string(D - 1) + "]");
    }
    std::size_t const slice = si.get<std::size_t>();
    auto const& b = req["box"];
    if (!b.is_array() || b.size() != 4 ||
        !std::all_of(b.begin(), b.end(), [](json const& x) { return x.is_number_integer() && x.get<long long>() >= 0; })) {
        return json_error(422, "box must be [x0, y0, x1, y1] with non-negative integer pixel coordinates");
    }
    PromptBox box;
    box.slice_index = slice;
    box.x0 = b[0].get<std::size_t>();
    box.y0 = b[1].get<std::size_t>();
    box.x1 = b[2].get<std::size_t>();
    box.y1 = b[3].get<std::size_t>();
    box = std::get<PromptBox>(canonicalize(box));
    if (box.x0 == box.x1 || box.y0 == box.y1) {
        return json_error(422, "box has zero area");
    }
    if (box.x1 > W || box.y1 > H) {
        return json_error(422, "box exceeds the " + std::to_string(W) + "x" + std::to_string(H) + " image");
    }
    auto const& mc = model_.config();
    if (H != mc.image_height || W != mc.image_width) {
        return json_error(422, "volume is " + std::to_string(W) + "x" + std::to_string(H) + " but the checkpoint expects " +
                                   std::to_string(mc.image_width) + "x" + std::to_string(mc.image_height));
    }

    std::size_t const start = D >= kGroupSize ? std::min(slice > 0 ? slice - 1 : 0, D - kGroupSize) : 0;
    DepthIndices window{};
    for (std::size_t g = 0; g < kGroupSize; ++g) {
        window[g] = std::min(start + g, D - 1);
    }
    std::size_t const pos = static_cast<std::size_t>(std::find(window.begin(), window.end(), slice) - window.begin());
    auto const prob = infer_window(model_, vol, window, box);
    std::span<float const> p(prob.data() + pos * H * W, H * W);
    std::vector<float> mask(H * W);
    std::transform(p.begin(), p.end(), mask.begin(),
                   [&](float x) { return static_cast<double>(x) >= threshold_ ? 1.0f : 0.0f; });
    double sum = 0.0;
    for (float x : p) {
        sum += x;
    }
    auto [lo, hi] = std::minmax_element(p.begin(), p.end());
    double const latency =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    json out{{"rle", rle_encode(mask)},
             {"width", W},
             {"height", H},
             {"slice_index", slice},
             {"window", window},
             {"stats", {{"min", *lo}, {"max", *hi}, {"mean", sum / static_cast<double>(H * W)}}},
             {"checkpoint_id", checkpoint_id_},
             {"latency_ms", latency}};
    return HttpResult{200, "application/json", out.dump()};
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
    httplib::Server server;
};

HttpServer::HttpServer(SegmentService& service, std::size_t threads) : impl_(std::make_unique<Impl>()) {
    auto& srv = impl_->server;
    threads = std::max<std::size_t>(1, threads);
    srv.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    auto reply = [](httplib::Response& res, HttpResult const& r) {
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    srv.Get("/healthz", [&service, reply](httplib::Request const&, httplib::Response& res) {
        reply(res, service.healthz());
    });
    srv.Post("/volumes", [&service, reply](httplib::Request const& req, httplib::Response& res) {
        if (!req.is_multipart_form_data() || !req.has_file("header") || !req.has_file("payload")) {
            reply(res, json_error(400, "upload must be multipart/form-data with parts \"header\" and \"payload\""));
            return;
        }
        reply(res, service.upload(req.get_file_value("header").content, req.get_file_value("payload").content));
    });
    srv.Get(R"(/volumes/([^/]+))", [&service, reply](httplib::Request const& req, httplib::Response& res) {
        reply(res, service.volume_metadata(req.matches[1]));
    });
    srv.Get(R"(/volumes/([^/]+)/slices/([^/]+))",
            [&service, reply](httplib::Request const& req, httplib::Response& res) {
                reply(res, service.slice_png(req.matches[1], req.matches[2],
                                             req.has_param("modality") ? req.get_param_value("modality") : ""));
            });
    srv.Post("/segment", [&service, reply](httplib::Request const& req, httplib::Response& res) {
        reply(res, service.segment(req.body));
    });
    srv.set_exception_handler([](httplib::Request const&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (std::exception const& e) {
            what = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(json{{"error", what}}.dump(), "application/json");
    });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(std::string const& host, int port) {
    if (port == 0) {
        int const bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) {
            throw Error("cannot bind " + host);
        }
        return bound;
    }
    if (!impl_->server.bind_to_port(host, port)) {
        throw Error("cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

} // namespace gbtsam
