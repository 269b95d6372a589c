#include "mhj/tensor_store.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace mhj {

using json = nlohmann::json;

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(n, 0.0);
    return t;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries) n += t.size();
    return n;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw ShapeMismatch("missing tensor: " + name);
    return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ShapeMismatch("missing tensor: " + name);
    return it->second;
}

bool ParamSet::shape_compatible(const ParamSet& other) const {
    if (entries.size() != other.entries.size()) return false;
    auto a = entries.begin();
    auto b = other.entries.begin();
    for (; a != entries.end(); ++a, ++b) {
        if (a->first != b->first) return false;
        if (a->second.shape != b->second.shape) return false;
    }
    return true;
}

void check_shape_compatible(const ParamSet& a, const ParamSet& b) {
    if (!a.shape_compatible(b))
        throw ShapeMismatch("parameter sets have different name sets or shapes");
}

void check_finite(const ParamSet& p, const char* what) {
    for (const auto& [name, t] : p.entries)
        for (double v : t.data)
            if (!std::isfinite(v))
                throw NonFiniteResult(std::string(what) + ": non-finite value in " + name);
}

TaskVector task_vector(const ParamSet& finetuned, const ParamSet& base) {
    check_shape_compatible(finetuned, base);
    if (base.entries.empty())
        throw ShapeMismatch("task_vector: empty parameter sets");
    TaskVector out;
    out.delta = base;
    auto f = finetuned.entries.begin();
    for (auto& [name, t] : out.delta.entries) {
        const auto& ft = f->second;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = ft.data[i] - t.data[i];
        ++f;
    }
    return out;
}

ParamSet apply_delta(const ParamSet& base, const TaskVector& delta, double scale) {
    check_shape_compatible(base, delta.delta);
    ParamSet out = base;
    auto d = delta.delta.entries.begin();
    for (auto& [name, t] : out.entries) {
        const auto& dt = d->second;
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] += scale * dt.data[i];
            if (!std::isfinite(t.data[i]))
                throw NonFiniteResult("apply_delta: non-finite result in " + name);
        }
        ++d;
    }
    return out;
}

double cosine_similarity(const TaskVector& a, const TaskVector& b) {
    check_shape_compatible(a.delta, b.delta);
    double dot = 0.0, na = 0.0, nb = 0.0;
    auto ia = a.delta.entries.begin();
    auto ib = b.delta.entries.begin();
    for (; ia != a.delta.entries.end(); ++ia, ++ib) {
        const auto& va = ia->second.data;
        const auto& vb = ib->second.data;
        for (std::size_t i = 0; i < va.size(); ++i) {
            dot += va[i] * vb[i];
            na += va[i] * va[i];
            nb += vb[i] * vb[i];
        }
    }
    if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine_similarity: zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> flatten(const ParamSet& p) {
    std::vector<double> out;
    out.reserve(p.scalar_count());
    for (const auto& [name, t] : p.entries)
        out.insert(out.end(), t.data.begin(), t.data.end());
    return out;
}

ParamSet unflatten_like(const ParamSet& shape_ref, const std::vector<double>& flat) {
    if (flat.size() != shape_ref.scalar_count())
        throw ShapeMismatch("unflatten_like: scalar count mismatch");
    ParamSet out = shape_ref;
    std::size_t k = 0;
    for (auto& [name, t] : out.entries)
        for (double& v : t.data) v = flat[k++];
    return out;
}

ParamSet zeros_like(const ParamSet& p) {
    ParamSet out = p;
    for (auto& [name, t] : out.entries) std::fill(t.data.begin(), t.data.end(), 0.0);
    return out;
}

void add_scaled(ParamSet& acc, const ParamSet& x, double scale) {
    check_shape_compatible(acc, x);
    auto ix = x.entries.begin();
    for (auto& [name, t] : acc.entries) {
        const auto& xv = ix->second.data;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += scale * xv[i];
        ++ix;
    }
}

double l2_norm(const ParamSet& p) {
    double s = 0.0;
    for (const auto& [name, t] : p.entries)
        for (double v : t.data) s += v * v;
    return std::sqrt(s);
}

namespace {

constexpr char kMagic[4] = {'M', 'H', 'J', '1'};

void put_u64_le(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const ParamSet& p, const std::string& path) {
    if (p.entries.empty())
        throw FormatError("save_checkpoint: parameter set has no tensors");

    json params = json::array();
    for (const auto& [name, t] : p.entries) {
        std::size_t n = 1;
        for (std::size_t d : t.shape) n *= d;
        if (n != t.data.size())
            throw FormatError("save_checkpoint: shape/data mismatch in " + name);
        for (double v : t.data)
            if (!std::isfinite(v))
                throw FormatError("save_checkpoint: non-finite value in " + name);
        params.push_back({{"name", name}, {"shape", t.shape}});
    }
    json header = {{"dtype", "f64le"}, {"params", params}};
    const std::string hs = header.dump();

    std::string payload;
    payload.reserve(p.scalar_count() * 8);
    for (const auto& [name, t] : p.entries)
        for (double v : t.data) put_u64_le(payload, std::bit_cast<std::uint64_t>(v));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(kMagic, 4);
    const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
    char lenb[4];
    for (int i = 0; i < 4; ++i) lenb[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    out.write(lenb, 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

ParamSet load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("load_checkpoint: read failed for " + path);

    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("load_checkpoint: bad magic in " + path);
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(u[4 + i]) << (8 * i);
    if (bytes.size() < 8 + static_cast<std::size_t>(hlen))
        throw FormatError("load_checkpoint: truncated header in " + path);

    json header;
    try {
        header = json::parse(bytes.substr(8, hlen));
    } catch (const json::exception& e) {
        throw FormatError(std::string("load_checkpoint: bad header json: ") + e.what());
    }
    if (!header.is_object() || header.value("dtype", "") != "f64le" || !header.contains("params") ||
        !header["params"].is_array() || header["params"].empty())
        throw FormatError("load_checkpoint: malformed header in " + path);

    ParamSet p;
    std::size_t total = 0;
    std::vector<std::pair<std::string, std::size_t>> order;
    for (const auto& e : header["params"]) {
        if (!e.contains("name") || !e.contains("shape") || !e["shape"].is_array())
            throw FormatError("load_checkpoint: malformed param entry in " + path);
        const std::string name = e["name"].get<std::string>();
        Tensor t;
        std::size_t n = 1;
        for (const auto& d : e["shape"]) {
            const std::size_t dim = d.get<std::size_t>();
            t.shape.push_back(dim);
            n *= dim;
        }
        t.data.resize(n);
        if (!p.entries.emplace(name, std::move(t)).second)
            throw FormatError("load_checkpoint: duplicate tensor name " + name);
        order.emplace_back(name, n);
        total += n;
    }
    if (bytes.size() != 8 + hlen + total * 8)
        throw FormatError("load_checkpoint: payload length mismatch in " + path);

    const unsigned char* cur = u + 8 + hlen;
    for (const auto& [name, n] : order) {
        auto& data = p.entries.at(name).data;
        for (std::size_t i = 0; i < n; ++i, cur += 8) {
            const double v = std::bit_cast<double>(get_u64_le(cur));
            if (!std::isfinite(v))
                throw FormatError("load_checkpoint: non-finite value in " + name);
            data[i] = v;
        }
    }
    return p;
}

} // namespace mhj
