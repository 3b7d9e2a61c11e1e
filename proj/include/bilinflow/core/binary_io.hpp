/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/core/binary_io.hpp
 *
 * Copyright 2026 The bilinflow authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef BILINFLOW_CORE_BINARY_IO_HPP
#define BILINFLOW_CORE_BINARY_IO_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string_view>
#include <string>
#include <vector>

namespace bilinflow {

static_assert(std::endian::native == std::endian::little,
              "binary containers are stored little-endian; big-endian hosts are not supported");

/**
 * Sequential writer for the library's versioned binary containers.
 *
 * Every container starts with an 8-byte magic tag followed by a u32 format
 * version. Integers are u64, reals are IEEE-754 doubles, matrices are stored
 * as (rows, cols, column-major data) so a reload is bit-exact.
 */
class BinaryWriter
{
public:
    BinaryWriter(std::string_view magic, std::uint32_t version)
    {
        if (magic.size() != 8)
        {
            throw InvalidArgument("binary magic tag must be exactly 8 bytes");
        }
        buffer_.write(magic.data(), 8);
        put(version);
    }

    void u64(std::uint64_t value) { put(value); }
    void f64(double value) { put(value); }

    void string(const std::string& value)
    {
        u64(value.size());
        buffer_.write(value.data(), static_cast<std::streamsize>(value.size()));
    }

    void vector(const Eigen::VectorXd& v)
    {
        u64(static_cast<std::uint64_t>(v.size()));
        raw(v.data(), v.size());
    }

    void matrix(const Eigen::MatrixXd& m)
    {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        raw(m.data(), m.size());
    }

    void indices(const std::vector<int>& values)
    {
        u64(values.size());
        for (int v : values)
        {
            put(static_cast<std::int64_t>(v));
        }
    }

    std::string bytes() const { return buffer_.str(); }

private:
    template <typename T>
    void put(T value)
    {
        buffer_.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }

    void raw(const double* data, Eigen::Index count)
    {
        buffer_.write(reinterpret_cast<const char*>(data),
                      static_cast<std::streamsize>(count * static_cast<Eigen::Index>(sizeof(double))));
    }

    std::ostringstream buffer_;
};

/**
 * Reader matching BinaryWriter. Throws ParseError on magic or version
 * mismatch and on truncated input.
 */
class BinaryReader
{
public:
    BinaryReader(std::string data, std::string_view magic, std::uint32_t version)
        : data_(std::move(data))
    {
        if (data_.size() < 12 || data_.compare(0, 8, magic) != 0)
        {
            throw ParseError("not a '" + std::string(magic) + "' container");
        }
        offset_ = 8;
        const auto stored = get<std::uint32_t>();
        if (stored != version)
        {
            throw ParseError("unsupported " + std::string(magic) + " version " + std::to_string(stored) +
                             " (expected " + std::to_string(version) + ")");
        }
    }

    std::uint64_t u64() { return get<std::uint64_t>(); }
    double f64() { return get<double>(); }

    std::string string()
    {
        const auto n = u64();
        check(n);
        std::string s = data_.substr(offset_, n);
        offset_ += n;
        return s;
    }

    Eigen::VectorXd vector()
    {
        const auto n = u64();
        Eigen::VectorXd v(static_cast<Eigen::Index>(n));
        raw(v.data(), n);
        return v;
    }

    Eigen::MatrixXd matrix()
    {
        const auto rows = u64();
        const auto cols = u64();
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        raw(m.data(), rows * cols);
        return m;
    }

    std::vector<int> indices()
    {
        const auto n = u64();
        std::vector<int> out;
        out.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i)
        {
            out.push_back(static_cast<int>(get<std::int64_t>()));
        }
        return out;
    }

    bool at_end() const { return offset_ == data_.size(); }

private:
    void check(std::uint64_t bytes) const
    {
        if (offset_ + bytes > data_.size())
        {
            throw ParseError("truncated binary container");
        }
    }

    template <typename T>
    T get()
    {
        check(sizeof(T));
        T value;
        std::memcpy(&value, data_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return value;
    }

    void raw(double* out, std::uint64_t count)
    {
        const auto bytes = count * sizeof(double);
        check(bytes);
        std::memcpy(out, data_.data() + offset_, bytes);
        offset_ += bytes;
    }

    std::string data_;
    std::size_t offset_ = 0;
};

/**
 * Writes the whole content to a sibling temporary file and renames it over
 * the destination, so readers never observe a partially written artifact.
 */
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content)
{
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
        {
            throw IoError("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out)
        {
            throw IoError("write failed for '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
    {
        std::filesystem::remove(tmp);
        throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    }
}

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
    {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace bilinflow

#endif /* BILINFLOW_CORE_BINARY_IO_HPP */
