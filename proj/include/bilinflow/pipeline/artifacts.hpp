/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/pipeline/artifacts.hpp
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

#ifndef BILINFLOW_PIPELINE_ARTIFACTS_HPP
#define BILINFLOW_PIPELINE_ARTIFACTS_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"

#include "json.hpp"
#include "openssl/evp.h"

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace bilinflow {
namespace pipeline {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kLibraryVersion = "1.0.0";

/// An upstream artifact is absent or stale; the message names the stage to run.
class MissingArtifact : public Error
{
public:
    using Error::Error;
};

inline std::string sha256_hex(const std::string& bytes)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1)
    {
        throw Error("SHA-256 computation failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < length; ++i)
    {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xF];
    }
    return out;
}

inline std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

/// Regular files below `dir` keyed by '/'-separated path relative to `base`, excluding manifests.
inline std::map<std::string, std::string> hash_tree(const std::filesystem::path& dir, const std::filesystem::path& base)
{
    std::map<std::string, std::string> out;
    if (!std::filesystem::exists(dir))
        return out;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir))
    {
        if (!entry.is_regular_file() || entry.path().filename() == "manifest.json")
            continue;
        out[std::filesystem::relative(entry.path(), base).generic_string()] = file_sha256(entry.path());
    }
    return out;
}

inline nlohmann::ordered_json hashes_to_json(const std::map<std::string, std::string>& hashes)
{
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& [path, sha] : hashes)
        arr.push_back({{"path", path}, {"sha256", sha}});
    return arr;
}

inline std::map<std::string, std::string> hashes_from_json(const nlohmann::ordered_json& arr)
{
    std::map<std::string, std::string> out;
    for (const auto& e : arr)
        out[e.at("path").get<std::string>()] = e.at("sha256").get<std::string>();
    return out;
}

inline nlohmann::ordered_json load_manifest(const std::filesystem::path& path)
{
    try
    {
        return nlohmann::ordered_json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e)
    {
        throw ParseError("malformed manifest '" + path.string() + "': " + e.what());
    }
}

/**
 * One stage invocation. Outputs go to a hidden sibling directory that
 * replaces the stage directory only after the manifest is written, so an
 * interrupted run never leaves a half-written stage behind.
 */
class StageRun
{
public:
    StageRun(std::filesystem::path root, std::string stage, std::uint64_t seed, nlohmann::ordered_json config)
        : root_(std::move(root)), stage_(std::move(stage)), seed_(seed), config_(std::move(config))
    {
        partial_ = root_ / ("." + stage_ + ".partial");
        std::filesystem::remove_all(partial_);
        std::filesystem::create_directories(partial_);
    }

    StageRun(const StageRun&) = delete;
    StageRun& operator=(const StageRun&) = delete;

    ~StageRun()
    {
        std::error_code ec;
        if (!committed_)
            std::filesystem::remove_all(partial_, ec);
    }

    const std::filesystem::path& root() const { return root_; }

    /**
     * Path of `file` inside `producer`'s stage directory. The file must be
     * listed in that stage's manifest with an unchanged hash; the hash is
     * recorded as an input of this stage.
     */
    std::filesystem::path input(const std::string& producer, const std::string& file, const std::string& artifact)
    {
        const auto& outputs = producer_outputs(producer, artifact);
        const std::string key = producer + "/" + file;
        const auto it = outputs.find(key);
        const std::filesystem::path path = root_ / producer / file;
        if (it == outputs.end() || !std::filesystem::exists(path))
        {
            throw MissingArtifact("missing " + artifact + " artifact '" + key + "': run `" + producer + "` first");
        }
        const std::string sha = file_sha256(path);
        if (sha != it->second)
        {
            throw MissingArtifact(artifact + " artifact '" + key + "' changed after `" + producer +
                                  "` ran: rerun `" + producer + "`");
        }
        inputs_[key] = sha;
        return path;
    }

    /// Records every file of `producer` below `prefix` as an input and returns that directory.
    std::filesystem::path input_directory(const std::string& producer, const std::string& prefix,
                                          const std::string& artifact)
    {
        const auto& outputs = producer_outputs(producer, artifact);
        const std::string key = producer + "/" + prefix + "/";
        bool any = false;
        for (const auto& [file, sha] : outputs)
        {
            if (file.compare(0, key.size(), key) == 0)
            {
                input(producer, file.substr(producer.size() + 1), artifact);
                any = true;
            }
        }
        if (!any)
        {
            throw MissingArtifact("missing " + artifact + " artifact '" + key + "': run `" + producer + "` first");
        }
        return root_ / producer / prefix;
    }

    bool has_stage(const std::string& producer) const
    {
        return std::filesystem::exists(root_ / producer / "manifest.json");
    }

    /// Output path inside the partial directory; parent directories are created.
    std::filesystem::path output(const std::string& file)
    {
        const std::filesystem::path p = partial_ / file;
        std::filesystem::create_directories(p.parent_path());
        return p;
    }

    nlohmann::ordered_json& results() { return results_; }

    /// Writes the manifest and moves the stage directory into place.
    void commit()
    {
        // Output keys carry the final stage prefix, not the partial directory name.
        std::map<std::string, std::string> outputs;
        for (const auto& [rel, sha] : hash_tree(partial_, partial_))
            outputs[stage_ + "/" + rel] = sha;
        nlohmann::ordered_json m;
        m["stage"] = stage_;
        m["manifest_version"] = kManifestVersion;
        m["library_version"] = kLibraryVersion;
        m["seed"] = seed_;
        m["inputs"] = hashes_to_json(inputs_);
        m["outputs"] = hashes_to_json(outputs);
        m["results"] = results_;
        m["config"] = config_;
        write_file_atomic(partial_ / "manifest.json", m.dump(2) + "\n");
        const std::filesystem::path final_dir = root_ / stage_;
        std::filesystem::remove_all(final_dir);
        std::filesystem::rename(partial_, final_dir);
        committed_ = true;
    }

private:
    const std::map<std::string, std::string>& producer_outputs(const std::string& producer, const std::string& artifact)
    {
        auto it = upstream_.find(producer);
        if (it != upstream_.end())
            return it->second;
        const std::filesystem::path manifest = root_ / producer / "manifest.json";
        if (!std::filesystem::exists(manifest))
        {
            throw MissingArtifact("missing " + artifact + " artifact: run `" + producer + "` first (no manifest in '" +
                                  (root_ / producer).string() + "')");
        }
        return upstream_[producer] = hashes_from_json(load_manifest(manifest).at("outputs"));
    }

    std::filesystem::path root_;
    std::string stage_;
    std::uint64_t seed_;
    nlohmann::ordered_json config_;
    std::filesystem::path partial_;
    std::map<std::string, std::map<std::string, std::string>> upstream_;
    std::map<std::string, std::string> inputs_;
    nlohmann::ordered_json results_ = nlohmann::ordered_json::object();
    bool committed_ = false;
};

/**
 * Checks every stage manifest under `root`: recorded outputs exist with the
 * recorded hashes, and recorded inputs still match the files present.
 * Returns one message per problem; empty means the DAG is consistent.
 */
inline std::vector<std::string> verify_manifests(const std::filesystem::path& root)
{
    std::vector<std::string> problems;
    if (!std::filesystem::exists(root))
    {
        problems.push_back("stage directory '" + root.string() + "' does not exist");
        return problems;
    }
    std::vector<std::filesystem::path> manifests;
    for (const auto& entry : std::filesystem::directory_iterator(root))
    {
        const auto m = entry.path() / "manifest.json";
        if (entry.is_directory() && entry.path().filename().string().front() != '.' && std::filesystem::exists(m))
            manifests.push_back(m);
    }
    std::sort(manifests.begin(), manifests.end());
    for (const auto& path : manifests)
    {
        const auto m = load_manifest(path);
        const std::string stage = m.at("stage").get<std::string>();
        for (const char* kind : {"outputs", "inputs"})
        {
            for (const auto& [file, sha] : hashes_from_json(m.at(kind)))
            {
                const auto p = root / file;
                if (!std::filesystem::exists(p))
                    problems.push_back(stage + ": " + kind + " file '" + file + "' is missing");
                else if (file_sha256(p) != sha)
                    problems.push_back(stage + ": " + kind + " file '" + file + "' does not match its recorded hash");
            }
        }
        const auto outputs = hashes_from_json(m.at("outputs"));
        const auto present = hash_tree(root / stage, root);
        for (const auto& [file, sha] : present)
        {
            if (!outputs.count(file))
                problems.push_back(stage + ": unrecorded file '" + file + "'");
        }
    }
    return problems;
}

} // namespace pipeline
} // namespace bilinflow

#endif /* BILINFLOW_PIPELINE_ARTIFACTS_HPP */
