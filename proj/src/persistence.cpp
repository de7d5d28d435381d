// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/persistence.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "json_util.h"

namespace comol {

namespace fs = std::filesystem;

namespace {

template <typename T>
constexpr const char* dtype_tag() {
    return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
    auto bits = std::bit_cast<Bits<T>>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<unsigned char>(bits & 0xffu));
        bits >>= 8;
    }
}

template <typename T>
T get_le(const unsigned char* p) {
    Bits<T> bits = 0;
    for (std::size_t i = sizeof(T); i-- > 0;) {
        bits = static_cast<Bits<T>>((bits << 8) | p[i]);
    }
    return std::bit_cast<T>(bits);
}

std::size_t align_up(std::size_t x) {
    return (x + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
}

struct Slot {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

template <typename T>
struct Entry {
    std::string name;
    const BasicMatrix<T>* tensor;
};

void write_file(const fs::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing", path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    out.close();
    if (!out) throw IoError("write failed", path.string());
}

std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading", path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed", path.string());
    return bytes;
}

template <typename T>
void write_bundle(const fs::path& dir, nlohmann::json manifest,
                  const std::vector<Entry<T>>& entries) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory", dir.string());

    std::vector<unsigned char> blob;
    auto tensors = nlohmann::json::array();
    for (const auto& e : entries) {
        blob.resize(align_up(blob.size()), 0);
        const std::size_t offset = blob.size();
        for (T v : e.tensor->data()) put_le<T>(blob, v);
        tensors.push_back({{"name", e.name},
                           {"shape", {e.tensor->rows(), e.tensor->cols()}},
                           {"dtype", dtype_tag<T>()},
                           {"byte_offset", offset},
                           {"byte_length", blob.size() - offset}});
    }
    manifest["format_version"] = kFormatVersion;
    manifest["dtype"] = dtype_tag<T>();
    manifest["tensors"] = std::move(tensors);
    manifest["blob_length"] = blob.size();

    write_file(dir / kBlobFile, blob.data(), blob.size());
    const std::string text = manifest.dump(2) + "\n";
    write_file(dir / kManifestFile, text.data(), text.size());
}

std::size_t unsigned_field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_number_unsigned()) {
        throw IntegrityError(fmt::format("manifest field '{}' missing or not an unsigned integer", key));
    }
    return j.at(key).get<std::size_t>();
}

std::string string_field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_string()) {
        throw IntegrityError(fmt::format("manifest field '{}' missing or not a string", key));
    }
    return j.at(key).get<std::string>();
}

void check_version(const nlohmann::json& manifest) {
    if (!manifest.is_object() || !manifest.contains("format_version")) {
        throw IntegrityError("manifest has no format_version");
    }
    const auto& v = manifest.at("format_version");
    if (!v.is_number_integer()) throw IntegrityError("format_version is not an integer");
    if (v.get<std::int64_t>() != kFormatVersion) {
        throw VersionError(fmt::format("unsupported checkpoint format_version {} (expected {})",
                                       v.dump(), kFormatVersion));
    }
}

// Checks the manifest tensor table against the expected slots and the blob,
// then decodes every tensor.
template <typename T>
std::vector<BasicMatrix<T>> read_bundle(const fs::path& dir, const nlohmann::json& manifest,
                                        const std::vector<Slot>& slots) {
    const auto& tensors = manifest.contains("tensors") ? manifest.at("tensors") : nlohmann::json();
    if (!tensors.is_array()) throw IntegrityError("manifest 'tensors' is not an array");
    if (tensors.size() != slots.size()) {
        throw IntegrityError(fmt::format("manifest lists {} tensors, expected {}", tensors.size(),
                                         slots.size()));
    }
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& t = tensors[i];
        const auto& s = slots[i];
        if (!t.is_object()) throw IntegrityError("tensor entry is not an object");
        if (string_field(t, "name") != s.name) {
            throw IntegrityError(fmt::format("tensor {} is '{}', expected '{}'", i,
                                             string_field(t, "name"), s.name));
        }
        if (string_field(t, "dtype") != dtype_tag<T>()) {
            throw IntegrityError(fmt::format("tensor '{}' dtype disagrees with checkpoint", s.name));
        }
        const auto& shape = t.contains("shape") ? t.at("shape") : nlohmann::json();
        if (shape != nlohmann::json::array({s.rows, s.cols})) {
            throw IntegrityError(fmt::format("tensor '{}' shape {} disagrees with config ({}x{})",
                                             s.name, shape.dump(), s.rows, s.cols));
        }
        cursor = align_up(cursor);
        if (unsigned_field(t, "byte_offset") != cursor) {
            throw IntegrityError(fmt::format("tensor '{}' byte_offset {} (expected {})", s.name,
                                             unsigned_field(t, "byte_offset"), cursor));
        }
        const std::size_t length = s.rows * s.cols * sizeof(T);
        if (unsigned_field(t, "byte_length") != length) {
            throw IntegrityError(fmt::format("tensor '{}' byte_length {} (expected {})", s.name,
                                             unsigned_field(t, "byte_length"), length));
        }
        cursor += length;
    }
    if (unsigned_field(manifest, "blob_length") != cursor) {
        throw IntegrityError(fmt::format("blob_length {} (expected {})",
                                         unsigned_field(manifest, "blob_length"), cursor));
    }

    std::error_code ec;
    const auto on_disk = fs::file_size(dir / kBlobFile, ec);
    if (ec) throw IoError("cannot stat", (dir / kBlobFile).string());
    if (on_disk != cursor) {
        throw IntegrityError(fmt::format("{} holds {} bytes, manifest declares {}", kBlobFile,
                                         on_disk, cursor));
    }
    const auto blob = read_file(dir / kBlobFile);
    if (blob.size() != cursor) throw IoError("short read", (dir / kBlobFile).string());

    std::vector<BasicMatrix<T>> out;
    out.reserve(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const std::size_t offset = tensors[i].at("byte_offset").get<std::size_t>();
        std::vector<T> values(slots[i].rows * slots[i].cols);
        for (std::size_t k = 0; k < values.size(); ++k) {
            values[k] = get_le<T>(blob.data() + offset + k * sizeof(T));
        }
        out.emplace_back(slots[i].rows, slots[i].cols, std::move(values));
    }
    return out;
}

template <typename T>
std::vector<Slot> layer_slots(const LayerConfig& config) {
    const auto skeleton = init_layer<T>(config, BasicMatrix<T>(config.m, config.n), 0);
    std::vector<Slot> slots{{"base.w", config.m, config.n}};
    for_each_tensor<T>(skeleton.params, [&](const std::string& name, const BasicMatrix<T>& t) {
        slots.push_back({name, t.rows(), t.cols()});
    });
    return slots;
}

template <typename T>
AdapterLayer<T> decode_layer(const fs::path& dir, const nlohmann::json& manifest,
                             const LayerConfig& config) {
    const auto tensors = read_bundle<T>(dir, manifest, layer_slots<T>(config));
    auto layer = init_layer<T>(config, tensors[0], 0);
    std::size_t i = 1;
    for_each_tensor<T>(layer.params, [&](const std::string&, BasicMatrix<T>& t) {
        t = tensors[i++];
    });
    validate_layer(layer);
    return layer;
}

template <typename T>
T json_field(const nlohmann::json& j, const std::string& key) {
    try {
        if constexpr (std::is_unsigned_v<T>) {
            if (!detail::is_count(j)) {
                throw ConfigError(fmt::format("layer.{} must be a non-negative integer", key));
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) throw ConfigError(fmt::format("layer.{} must be a number", key));
        }
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("layer.{}: {}", key, e.what()));
    }
}

}  // namespace

nlohmann::json to_json(const LayerConfig& c) {
    return {{"method", std::string(to_string(c.method))},
            {"m", c.m},
            {"n", c.n},
            {"r", c.r},
            {"num_experts", c.num_experts},
            {"top_k", c.top_k},
            {"alpha", c.alpha}};
}

LayerConfig layer_config_from_json(const nlohmann::json& j, LayerConfig c) {
    if (!j.is_object()) throw ConfigError("layer must be an object");
    for (const auto& [key, v] : j.items()) {
        if (key == "method") {
            if (!v.is_string()) throw ConfigError("layer.method must be a string");
            try {
                c.method = parse_method(v.get<std::string>());
            } catch (const ParameterError& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "m") c.m = json_field<std::size_t>(v, key);
        else if (key == "n") c.n = json_field<std::size_t>(v, key);
        else if (key == "r") c.r = json_field<std::size_t>(v, key);
        else if (key == "num_experts") c.num_experts = json_field<std::size_t>(v, key);
        else if (key == "top_k") c.top_k = json_field<std::size_t>(v, key);
        else if (key == "alpha") c.alpha = json_field<double>(v, key);
        else throw ConfigError(fmt::format("unknown key layer.{}", key));
    }
    return c;
}

template <typename T>
void save_checkpoint(const AdapterLayer<T>& layer, const fs::path& dir) {
    validate_layer(layer);
    std::vector<std::string> names{"base.w"};
    std::vector<const BasicMatrix<T>*> ptrs{&layer.w};
    for_each_tensor<T>(layer.params, [&](const std::string& name, const BasicMatrix<T>& t) {
        names.push_back(name);
        ptrs.push_back(&t);
    });
    std::vector<Entry<T>> entries;
    for (std::size_t i = 0; i < names.size(); ++i) entries.push_back({names[i], ptrs[i]});
    nlohmann::json manifest = {{"kind", "layer"},
                               {"method", std::string(to_string(layer.config.method))},
                               {"config", to_json(layer.config)}};
    write_bundle<T>(dir, std::move(manifest), entries);
}

nlohmann::json read_manifest(const fs::path& dir) {
    const auto bytes = read_file(dir / kManifestFile);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError(fmt::format("{} is not valid JSON: {}", kManifestFile, e.what()));
    }
}

AnyLayer load_checkpoint(const fs::path& dir) {
    const auto manifest = read_manifest(dir);
    check_version(manifest);
    if (string_field(manifest, "kind") != "layer") {
        throw IntegrityError("checkpoint kind is not 'layer'");
    }
    if (!manifest.contains("config")) throw IntegrityError("manifest has no config");
    LayerConfig config;
    try {
        config = layer_config_from_json(manifest.at("config"));
        config.validate();
    } catch (const ConfigError& e) {
        throw IntegrityError(fmt::format("manifest config invalid: {}", e.what()));
    }
    if (string_field(manifest, "method") != to_string(config.method)) {
        throw IntegrityError("manifest method disagrees with config.method");
    }
    const std::string dtype = string_field(manifest, "dtype");
    if (dtype == "f32") return decode_layer<float>(dir, manifest, config);
    if (dtype == "f64") return decode_layer<double>(dir, manifest, config);
    throw IntegrityError(fmt::format("unknown dtype '{}'", dtype));
}

AdapterLayer<double> load_checkpoint_f64(const fs::path& dir) {
    return std::visit(
        [](auto&& layer) -> AdapterLayer<double> {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, AdapterLayer<double>>) return std::move(layer);
            else return cast_layer<double>(layer);
        },
        load_checkpoint(dir));
}

void save_task(const SyntheticTask& task, const fs::path& dir) {
    const auto& c = task.config;
    Matrix directions(task.directions.size(), c.n);
    for (std::size_t i = 0; i < task.directions.size(); ++i) {
        std::copy(task.directions[i].begin(), task.directions[i].end(), directions.row(i).begin());
    }
    std::vector<Entry<double>> entries{{"w_frozen", &task.w_frozen}, {"directions", &directions}};
    for (std::size_t i = 0; i < task.cluster_p.size(); ++i) {
        entries.push_back({fmt::format("cluster_p.{}", i), &task.cluster_p[i]});
        entries.push_back({fmt::format("cluster_q.{}", i), &task.cluster_q[i]});
        entries.push_back({fmt::format("cluster_deltas.{}", i), &task.cluster_deltas[i]});
    }
    auto meta = nlohmann::json::array();
    for (std::size_t i = 0; i < task.sequences.size(); ++i) {
        const auto& s = task.sequences[i];
        entries.push_back({fmt::format("sequences.{}.tokens", i), &s.tokens});
        entries.push_back({fmt::format("sequences.{}.targets", i), &s.targets});
        meta.push_back({{"clusters", s.clusters}, {"mixed", s.mixed}});
    }
    nlohmann::json manifest = {{"kind", "task"}, {"config", to_json(c)}, {"sequences", meta}};
    write_bundle<double>(dir, std::move(manifest), entries);
}

SyntheticTask load_task(const fs::path& dir) {
    const auto manifest = read_manifest(dir);
    check_version(manifest);
    if (string_field(manifest, "kind") != "task") {
        throw IntegrityError("checkpoint kind is not 'task'");
    }
    if (string_field(manifest, "dtype") != "f64") throw IntegrityError("task dtype must be f64");
    SyntheticTask task;
    try {
        task.config = task_config_from_json(manifest.at("config"));
        task.config.validate();
    } catch (const std::exception& e) {
        throw IntegrityError(fmt::format("manifest config invalid: {}", e.what()));
    }
    const auto& c = task.config;
    const auto& meta = manifest.contains("sequences") ? manifest.at("sequences") : nlohmann::json();
    if (!meta.is_array() || meta.size() != c.num_sequences) {
        throw IntegrityError("manifest sequence table disagrees with config");
    }

    std::vector<Slot> slots{{"w_frozen", c.m, c.n}, {"directions", c.clusters, c.n}};
    for (std::size_t i = 0; i < c.clusters; ++i) {
        slots.push_back({fmt::format("cluster_p.{}", i), c.m, c.r_true});
        slots.push_back({fmt::format("cluster_q.{}", i), c.r_true, c.n});
        slots.push_back({fmt::format("cluster_deltas.{}", i), c.m, c.n});
    }
    for (std::size_t i = 0; i < c.num_sequences; ++i) {
        slots.push_back({fmt::format("sequences.{}.tokens", i), c.seq_len, c.n});
        slots.push_back({fmt::format("sequences.{}.targets", i), c.seq_len, c.m});
    }
    auto tensors = read_bundle<double>(dir, manifest, slots);

    std::size_t k = 0;
    task.w_frozen = std::move(tensors[k++]);
    const Matrix directions = std::move(tensors[k++]);
    for (std::size_t i = 0; i < c.clusters; ++i) {
        const auto row = directions.row(i);
        task.directions.emplace_back(row.begin(), row.end());
        task.cluster_p.push_back(std::move(tensors[k++]));
        task.cluster_q.push_back(std::move(tensors[k++]));
        task.cluster_deltas.push_back(std::move(tensors[k++]));
    }
    for (std::size_t i = 0; i < c.num_sequences; ++i) {
        Sequence s;
        s.tokens = std::move(tensors[k++]);
        s.targets = std::move(tensors[k++]);
        try {
            s.clusters = meta[i].at("clusters").get<std::vector<std::size_t>>();
            s.mixed = meta[i].at("mixed").get<bool>();
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(fmt::format("sequence {} metadata: {}", i, e.what()));
        }
        if (s.clusters.size() != c.seq_len) {
            throw IntegrityError(fmt::format("sequence {} cluster list has wrong length", i));
        }
        task.sequences.push_back(std::move(s));
    }
    return task;
}

template void save_checkpoint<float>(const AdapterLayer<float>&, const fs::path&);
template void save_checkpoint<double>(const AdapterLayer<double>&, const fs::path&);

}  // namespace comol
