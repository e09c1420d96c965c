#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <variant>

#include "blockvol/errors.hpp"

namespace blockvol {

enum class Dtype : std::uint8_t { u8, u16, u32, u64, i8, i16, i32, i64, f32, f64 };

constexpr std::size_t dtype_size(Dtype dt) {
    switch (dt) {
        case Dtype::u8:
        case Dtype::i8: return 1;
        case Dtype::u16:
        case Dtype::i16: return 2;
        case Dtype::u32:
        case Dtype::i32:
        case Dtype::f32: return 4;
        case Dtype::u64:
        case Dtype::i64:
        case Dtype::f64: return 8;
    }
    return 0;
}

constexpr std::string_view dtype_name(Dtype dt) {
    switch (dt) {
        case Dtype::u8: return "u8";
        case Dtype::u16: return "u16";
        case Dtype::u32: return "u32";
        case Dtype::u64: return "u64";
        case Dtype::i8: return "i8";
        case Dtype::i16: return "i16";
        case Dtype::i32: return "i32";
        case Dtype::i64: return "i64";
        case Dtype::f32: return "f32";
        case Dtype::f64: return "f64";
    }
    return "";
}

constexpr std::optional<Dtype> parse_dtype_name(std::string_view s) {
    if (s == "u8") return Dtype::u8;
    if (s == "u16") return Dtype::u16;
    if (s == "u32") return Dtype::u32;
    if (s == "u64") return Dtype::u64;
    if (s == "i8") return Dtype::i8;
    if (s == "i16") return Dtype::i16;
    if (s == "i32") return Dtype::i32;
    if (s == "i64") return Dtype::i64;
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    return std::nullopt;
}

constexpr bool dtype_is_float(Dtype dt) { return dt == Dtype::f32 || dt == Dtype::f64; }

constexpr bool dtype_is_unsigned(Dtype dt) {
    switch (dt) {
        case Dtype::u8:
        case Dtype::u16:
        case Dtype::u32:
        case Dtype::u64: return true;
        default: return false;
    }
}

template <class T> struct dtype_of_t;
template <> struct dtype_of_t<std::uint8_t> { static constexpr Dtype value = Dtype::u8; };
template <> struct dtype_of_t<std::uint16_t> { static constexpr Dtype value = Dtype::u16; };
template <> struct dtype_of_t<std::uint32_t> { static constexpr Dtype value = Dtype::u32; };
template <> struct dtype_of_t<std::uint64_t> { static constexpr Dtype value = Dtype::u64; };
template <> struct dtype_of_t<std::int8_t> { static constexpr Dtype value = Dtype::i8; };
template <> struct dtype_of_t<std::int16_t> { static constexpr Dtype value = Dtype::i16; };
template <> struct dtype_of_t<std::int32_t> { static constexpr Dtype value = Dtype::i32; };
template <> struct dtype_of_t<std::int64_t> { static constexpr Dtype value = Dtype::i64; };
template <> struct dtype_of_t<float> { static constexpr Dtype value = Dtype::f32; };
template <> struct dtype_of_t<double> { static constexpr Dtype value = Dtype::f64; };

template <class T> constexpr Dtype dtype_of = dtype_of_t<T>::value;

/// Calls f with a zero value of the runtime dtype, so the lambda can deduce
/// the element type: dispatch_dtype(dt, [&](auto zero) { using T = decltype(zero); ... });
template <class F>
decltype(auto) dispatch_dtype(Dtype dt, F&& f) {
    switch (dt) {
        case Dtype::u8: return f(std::uint8_t{});
        case Dtype::u16: return f(std::uint16_t{});
        case Dtype::u32: return f(std::uint32_t{});
        case Dtype::u64: return f(std::uint64_t{});
        case Dtype::i8: return f(std::int8_t{});
        case Dtype::i16: return f(std::int16_t{});
        case Dtype::i32: return f(std::int32_t{});
        case Dtype::i64: return f(std::int64_t{});
        case Dtype::f32: return f(float{});
        case Dtype::f64: return f(double{});
    }
    fail(Errc::invalid_argument, "unknown dtype");
}

/// A dtype-agnostic scalar. Keeps 64-bit integers exact (a u64 fill value
/// does not round-trip through double).
class Scalar {
public:
    Scalar() : v_(std::uint64_t{0}) {}
    explicit Scalar(std::uint64_t v) : v_(v) {}
    explicit Scalar(std::int64_t v) : v_(v) {}
    explicit Scalar(double v) : v_(v) {}
    explicit Scalar(int v) : v_(static_cast<std::int64_t>(v)) {}

    template <class T>
    T as() const {
        return std::visit([](auto v) { return static_cast<T>(v); }, v_);
    }

    bool is_float() const { return std::holds_alternative<double>(v_); }
    bool is_unsigned() const { return std::holds_alternative<std::uint64_t>(v_); }

    std::uint64_t raw_unsigned() const { return std::get<std::uint64_t>(v_); }
    std::int64_t raw_signed() const { return std::get<std::int64_t>(v_); }
    double raw_double() const { return std::get<double>(v_); }

private:
    std::variant<std::uint64_t, std::int64_t, double> v_;
};

} // namespace blockvol
