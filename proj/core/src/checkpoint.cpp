#include "uninpaint/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "uninpaint/errors.hpp"

namespace uninpaint {
namespace archive {

namespace {

std::uint32_t le32(const std::string& b, std::size_t at) {
    if (at + 4 > b.size()) {
        throw IoError("malformed archive while normalising");
    }
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | static_cast<unsigned char>(b[at + static_cast<std::size_t>(i)]);
    }
    return v;
}

std::uint64_t le64(const std::string& b, std::size_t at) {
    return le32(b, at) | (static_cast<std::uint64_t>(le32(b, at + 4)) << 32);
}

std::uint16_t le16(const std::string& b, std::size_t at) {
    if (at + 2 > b.size()) {
        throw IoError("malformed archive while normalising");
    }
    return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                      (static_cast<unsigned char>(b[at + 1]) << 8));
}

void put32(std::string& b, std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        b[at + static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    }
}

} // namespace

// torch stamps every archive with a random serialization id. It is replaced
// by a hash of the remaining bytes so equal states give equal files.
void make_deterministic(std::string& bytes) {
    constexpr std::uint32_t kEocd = 0x06054b50, kEocd64 = 0x06064b50, kLocator64 = 0x07064b50;
    constexpr std::uint32_t kCentral = 0x02014b50, kDescriptor = 0x08074b50;
    if (bytes.size() < 22) {
        throw IoError("archive too short to normalise");
    }
    std::size_t eocd = bytes.size() - 22;
    while (le32(bytes, eocd) != kEocd) {
        if (eocd == 0) {
            throw IoError("archive has no end-of-central-directory record");
        }
        --eocd;
    }
    std::uint64_t entries = le16(bytes, eocd + 10);
    std::uint64_t cd = le32(bytes, eocd + 16);
    if (cd == 0xFFFFFFFFu && eocd >= 20 && le32(bytes, eocd - 20) == kLocator64) {
        const auto rec = le64(bytes, eocd - 20 + 8);
        if (le32(bytes, rec) != kEocd64) {
            throw IoError("archive has a broken zip64 directory");
        }
        entries = le64(bytes, rec + 32);
        cd = le64(bytes, rec + 48);
    }

    const std::string suffix = ".data/serialization_id";
    for (std::uint64_t e = 0; e < entries; ++e) {
        if (le32(bytes, cd) != kCentral) {
            throw IoError("archive central directory is malformed");
        }
        const auto flags = le16(bytes, cd + 8);
        std::uint64_t csize = le32(bytes, cd + 20);
        const auto nlen = le16(bytes, cd + 28), xlen = le16(bytes, cd + 30), clen = le16(bytes, cd + 32);
        std::uint64_t local = le32(bytes, cd + 42);
        const auto name = bytes.substr(cd + 46, nlen);
        if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            // zip64 extra: original/compressed sizes then offset, each only if saturated.
            std::size_t x = cd + 46 + nlen;
            const std::size_t xend = x + xlen;
            while (x + 4 <= xend) {
                const auto id = le16(bytes, x), len = le16(bytes, x + 2);
                if (id == 0x0001) {
                    std::size_t f = x + 4;
                    if (le32(bytes, cd + 24) == 0xFFFFFFFFu) {
                        f += 8;
                    }
                    if (csize == 0xFFFFFFFFu) {
                        csize = le64(bytes, f);
                        f += 8;
                    }
                    if (local == 0xFFFFFFFFu) {
                        local = le64(bytes, f);
                    }
                }
                x += 4 + len;
            }
            const auto data = local + 30 + le16(bytes, local + 26) + le16(bytes, local + 28);
            if (data + csize > bytes.size() || le16(bytes, local + 8) != 0) {
                throw IoError("archive serialization id is not stored uncompressed");
            }

            std::size_t descriptor = 0;
            if (flags & 0x08u) {
                descriptor = data + csize;
                if (le32(bytes, descriptor) == kDescriptor) {
                    descriptor += 4;
                }
            }
            // The id and its checksums are excluded from the hash.
            std::string masked = bytes;
            std::fill_n(masked.begin() + static_cast<std::ptrdiff_t>(data), csize, '0');
            put32(masked, cd + 16, 0);
            put32(masked, local + 14, 0);
            if (descriptor != 0) {
                put32(masked, descriptor, 0);
            }
            std::uint64_t h = 1469598103934665603ULL;
            for (unsigned char c : masked) {
                h = (h ^ c) * 1099511628211ULL;
            }
            std::string id(static_cast<std::size_t>(csize), '0');
            for (std::size_t i = id.size(); i-- > 0 && h != 0; h /= 10) {
                id[i] = static_cast<char>('0' + h % 10);
            }
            bytes.replace(data, csize, id);

            const auto crc = static_cast<std::uint32_t>(
                crc32(0L, reinterpret_cast<const Bytef*>(id.data()), static_cast<uInt>(id.size())));
            put32(bytes, cd + 16, crc);
            if (le32(bytes, local + 14) != 0) {
                put32(bytes, local + 14, crc);
            }
            if (descriptor != 0) {
                put32(bytes, descriptor, crc);
            }
            return;
        }
        cd += 46 + nlen + xlen + clen;
    }
    throw IoError("archive has no serialization id record");
}


void write_string(torch::serialize::OutputArchive& ar, const std::string& key, const std::string& s) {
    ar.write(key, c10::IValue(s));
}

std::string read_string(torch::serialize::InputArchive& ar, const std::string& key) {
    c10::IValue v;
    if (!ar.try_read(key, v) || !v.isString()) {
        throw CheckpointError("checkpoint is missing string entry '" + key + "'");
    }
    return v.toStringRef();
}

void write_json(torch::serialize::OutputArchive& ar, const std::string& key, const nlohmann::json& j) {
    write_string(ar, key, j.dump());
}

nlohmann::json read_json(torch::serialize::InputArchive& ar, const std::string& key) {
    try {
        return nlohmann::json::parse(read_string(ar, key));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint entry '" + key + "' is not valid JSON: " + e.what());
    }
}

void write_int(torch::serialize::OutputArchive& ar, const std::string& key, std::int64_t v) {
    ar.write(key, c10::IValue(v));
}

std::int64_t read_int(torch::serialize::InputArchive& ar, const std::string& key) {
    c10::IValue v;
    if (!ar.try_read(key, v) || !v.isInt()) {
        throw CheckpointError("checkpoint is missing integer entry '" + key + "'");
    }
    return v.toInt();
}

void write_module(torch::serialize::OutputArchive& ar, const std::string& key, const torch::nn::Module& m) {
    torch::serialize::OutputArchive sub;
    m.save(sub);
    ar.write(key, sub);
}

void read_module(torch::serialize::InputArchive& ar, const std::string& key, torch::nn::Module& m) {
    torch::serialize::InputArchive sub;
    if (!ar.try_read(key, sub)) {
        throw CheckpointError("checkpoint is missing module '" + key + "'");
    }
    m.load(sub);
}

// Adam moments keyed by parameter position. torch's own Optimizer::save keys
// them by tensor address, which differs between runs.
void write_optimizer(torch::serialize::OutputArchive& ar, const std::string& key, const torch::optim::Optimizer& o) {
    const auto* adam = dynamic_cast<const torch::optim::Adam*>(&o);
    if (adam == nullptr) {
        throw ContractViolation("only Adam optimizers are checkpointed");
    }
    torch::serialize::OutputArchive sub;
    std::int64_t index = 0;
    for (const auto& group : adam->param_groups()) {
        for (const auto& p : group.params()) {
            const auto prefix = std::to_string(index++);
            auto it = adam->state().find(p.unsafeGetTensorImpl());
            if (it == adam->state().end()) {
                write_int(sub, prefix + "/step", -1);
                continue;
            }
            const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
            write_int(sub, prefix + "/step", st.step());
            sub.write(prefix + "/exp_avg", st.exp_avg());
            sub.write(prefix + "/exp_avg_sq", st.exp_avg_sq());
            if (st.max_exp_avg_sq().defined()) {
                sub.write(prefix + "/max_exp_avg_sq", st.max_exp_avg_sq());
            }
        }
    }
    write_int(sub, "count", index);
    ar.write(key, sub);
}

void read_optimizer(torch::serialize::InputArchive& ar, const std::string& key, torch::optim::Optimizer& o) {
    auto* adam = dynamic_cast<torch::optim::Adam*>(&o);
    if (adam == nullptr) {
        throw ContractViolation("only Adam optimizers are checkpointed");
    }
    torch::serialize::InputArchive sub;
    if (!ar.try_read(key, sub)) {
        throw CheckpointError("checkpoint is missing optimizer '" + key + "'");
    }
    std::int64_t index = 0;
    for (const auto& group : adam->param_groups()) {
        index += static_cast<std::int64_t>(group.params().size());
    }
    if (read_int(sub, "count") != index) {
        throw CheckpointError("optimizer '" + key + "' holds a different number of parameters");
    }
    index = 0;
    for (auto& group : adam->param_groups()) {
        for (auto& p : group.params()) {
            const auto prefix = std::to_string(index++);
            const auto step = read_int(sub, prefix + "/step");
            if (step < 0) {
                adam->state().erase(p.unsafeGetTensorImpl());
                continue;
            }
            auto st = std::make_unique<torch::optim::AdamParamState>();
            st->step(step);
            // A fresh tensor per entry: read() rebinds an already defined one.
            auto entry = [&](const std::string& name, bool required) {
                torch::Tensor t;
                if (required) {
                    sub.read(prefix + name, t);
                } else if (!sub.try_read(prefix + name, t)) {
                    return torch::Tensor();
                }
                return t.to(p.options()).clone();
            };
            st->exp_avg(entry("/exp_avg", true));
            st->exp_avg_sq(entry("/exp_avg_sq", true));
            if (auto m = entry("/max_exp_avg_sq", false); m.defined()) {
                st->max_exp_avg_sq(m);
            }
            if (st->exp_avg().sizes() != p.sizes() || st->exp_avg_sq().sizes() != p.sizes()) {
                throw CheckpointError("optimizer '" + key + "' moments do not match parameter " + prefix);
            }
            adam->state()[p.unsafeGetTensorImpl()] = std::move(st);
        }
    }
}

void check_schema(torch::serialize::InputArchive& ar, const std::string& expected_kind) {
    const auto version = read_int(ar, "schema_version");
    if (version != kCheckpointSchemaVersion) {
        throw CheckpointError("checkpoint schema version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointSchemaVersion) + ")");
    }
    const auto kind = read_string(ar, "kind");
    if (!expected_kind.empty() && kind != expected_kind) {
        throw CheckpointError("checkpoint holds a '" + kind + "' model, expected '" + expected_kind + "'");
    }
}

void load_archive(torch::serialize::InputArchive& ar, std::istream& in) {
    try {
        ar.load_from(in);
    } catch (const c10::Error& e) {
        throw CheckpointError(std::string("unreadable checkpoint: ") + e.what_without_backtrace());
    }
}

void load_archive(torch::serialize::InputArchive& ar, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    }
    load_archive(ar, in);
}

std::string serialize(torch::serialize::OutputArchive& ar) {
    std::string bytes;
    ar.save_to([&](const void* data, std::size_t n) {
        bytes.append(static_cast<const char*>(data), n);
        return n;
    });
    make_deterministic(bytes);
    return bytes;
}

void save_archive(torch::serialize::OutputArchive& ar, const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = serialize(ar);
    } catch (const c10::Error& e) {
        throw IoError("cannot write checkpoint '" + path.string() + "': " + e.what_without_backtrace());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("cannot write checkpoint '" + path.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

} // namespace archive

namespace {

torch::serialize::OutputArchive build_archive(const TrainState& state, const TrainConfig& cfg) {
    torch::serialize::OutputArchive ar;
    archive::write_int(ar, "schema_version", kCheckpointSchemaVersion);
    archive::write_string(ar, "kind", "unsupervised");
    archive::write_json(ar, "specs", state.specs);
    archive::write_json(ar, "config", cfg);
    archive::write_int(ar, "step", state.step);
    archive::write_int(ar, "micro_step", state.micro_step);
    archive::write_int(ar, "seed", static_cast<std::int64_t>(state.seed));
    archive::write_module(ar, "generator", *state.generator);
    archive::write_module(ar, "discriminator", *state.discriminator);
    archive::write_module(ar, "encoder", *state.encoder);
    archive::write_optimizer(ar, "opt_g", *state.opt_g);
    archive::write_optimizer(ar, "opt_d", *state.opt_d);
    archive::write_optimizer(ar, "opt_e", *state.opt_e);
    archive::write_int(ar, "pending", static_cast<std::int64_t>(state.pending.size()));
    for (std::size_t i = 0; i < state.pending.size(); ++i) {
        const auto& b = state.pending[i];
        const auto key = "pending_" + std::to_string(i);
        ar.write(key + "_y", b.y);
        ar.write(key + "_mask", b.mask);
        ar.write(key + "_ids", torch::tensor(b.ids, torch::kInt64));
    }
    return ar;
}

TrainState restore(torch::serialize::InputArchive& ar, TrainConfig* cfg_out) {
    try {
        archive::check_schema(ar, "unsupervised");
        auto specs = archive::read_json(ar, "specs").get<ModelSpecs>();
        auto cfg = archive::read_json(ar, "config").get<TrainConfig>();
        TrainState state = make_train_state(specs, cfg);
        state.step = archive::read_int(ar, "step");
        state.micro_step = archive::read_int(ar, "micro_step");
        state.seed = static_cast<std::uint64_t>(archive::read_int(ar, "seed"));
        archive::read_module(ar, "generator", *state.generator);
        archive::read_module(ar, "discriminator", *state.discriminator);
        archive::read_module(ar, "encoder", *state.encoder);
        archive::read_optimizer(ar, "opt_g", *state.opt_g);
        archive::read_optimizer(ar, "opt_d", *state.opt_d);
        archive::read_optimizer(ar, "opt_e", *state.opt_e);
        const auto pending = archive::read_int(ar, "pending");
        for (std::int64_t i = 0; i < pending; ++i) {
            const auto key = "pending_" + std::to_string(i);
            ObservationBatch b;
            torch::Tensor ids;
            ar.read(key + "_y", b.y);
            ar.read(key + "_mask", b.mask);
            ar.read(key + "_ids", ids);
            b.ids.assign(ids.data_ptr<std::int64_t>(), ids.data_ptr<std::int64_t>() + ids.numel());
            state.pending.push_back(std::move(b));
        }
        if (cfg_out != nullptr) {
            *cfg_out = cfg;
        }
        return state;
    } catch (const c10::Error& e) {
        throw CheckpointError(std::string("corrupt checkpoint: ") + e.what_without_backtrace());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint metadata is invalid: ") + e.what());
    }
}

} // namespace

void checkpoint_save(const TrainState& state, const TrainConfig& cfg, const std::filesystem::path& path) {
    auto ar = build_archive(state, cfg);
    archive::save_archive(ar, path);
}

void checkpoint_save(const TrainState& state, const TrainConfig& cfg, std::ostream& out) {
    auto ar = build_archive(state, cfg);
    const auto bytes = archive::serialize(ar);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TrainState checkpoint_load(const std::filesystem::path& path, TrainConfig* cfg_out) {
    torch::serialize::InputArchive ar;
    archive::load_archive(ar, path);
    return restore(ar, cfg_out);
}

TrainState checkpoint_load(std::istream& in, TrainConfig* cfg_out) {
    torch::serialize::InputArchive ar;
    archive::load_archive(ar, in);
    return restore(ar, cfg_out);
}

std::string checkpoint_kind(const std::filesystem::path& path) {
    torch::serialize::InputArchive ar;
    archive::load_archive(ar, path);
    try {
        return archive::read_string(ar, "kind");
    } catch (const c10::Error& e) {
        throw CheckpointError(std::string("corrupt checkpoint: ") + e.what_without_backtrace());
    }
}

} // namespace uninpaint
