#include "kvc/kvt_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "kvc/errors.hpp"

namespace kvc {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'T', '1'};

static_assert(sizeof(float) == 4);

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xff));
    }
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw TruncatedFile(std::string("kvt container truncated while reading ") + what);
        }
    }

    template <typename T>
    T get_le(const char* what) {
        need(sizeof(T), what);
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            value |= static_cast<T>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += sizeof(T);
        return value;
    }

    std::string get_string(std::size_t n) {
        need(n, "tensor name");
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::vector<float> get_floats(std::size_t n, const std::string& name) {
        if (n > (bytes_.size() - pos_) / 4) {
            throw TruncatedFile("kvt container truncated inside data of tensor '" + name + "'");
        }
        std::vector<float> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (std::size_t b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(bytes_[pos_ + b]) << (8 * b);
            }
            out[i] = std::bit_cast<float>(bits);
            pos_ += 4;
        }
        return out;
    }

    const std::uint8_t* cursor() const { return bytes_.data() + pos_; }
    void skip(std::size_t n) { pos_ += n; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_kvt(const TensorMap& tensors) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.dims()) {
            put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        }
        for (float v : t.data()) {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    return out;
}

TensorMap decode_kvt(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    r.need(4, "magic");
    if (std::memcmp(r.cursor(), kMagic, 4) != 0) {
        throw BadMagic("kvt container does not start with KVT1");
    }
    r.skip(4);
    const auto count = r.get_le<std::uint32_t>("tensor count");
    TensorMap tensors;
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = r.get_le<std::uint32_t>("name length");
        std::string name = r.get_string(name_len);
        const auto rank = r.get_le<std::uint8_t>("rank");
        if (rank == 0) {
            throw FormatError("tensor '" + name + "' has rank 0");
        }
        std::vector<std::size_t> dims(rank);
        std::size_t n = 1;
        for (auto& d : dims) {
            d = static_cast<std::size_t>(r.get_le<std::uint64_t>("extent"));
            if (d == 0) {
                throw FormatError("tensor '" + name + "' has a zero extent");
            }
            n *= d;
        }
        auto data = r.get_floats(n, name);
        tensors.insert_or_assign(name, Tensor(std::move(dims), std::move(data)));
    }
    return tensors;
}

void write_kvt(const std::filesystem::path& path, const TensorMap& tensors) {
    const auto bytes = encode_kvt(tensors);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw IoError("short write to " + path.string());
    }
}

TensorMap read_kvt(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_kvt(bytes);
}

} // namespace kvc
