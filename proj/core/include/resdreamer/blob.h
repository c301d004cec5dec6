#pragma once

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace resdreamer
{

/// One named little-endian array inside a blob file.
struct BlobArray
{
	std::string name;
	std::string dtype; // uint8 | int32 | int64 | float32 | float64
	std::vector<int64_t> shape;
	std::vector<uint8_t> bytes;

	int64_t elements() const;
};

/// A blob file is a single JSON header line followed by the raw arrays in header order.
///
/// The header always carries "format", "version" and "arrays" (name, dtype, shape per array); callers may add
/// further keys through `meta`.
struct Blob
{
	nlohmann::json meta;
	std::vector<BlobArray> arrays;

	const BlobArray& array(const std::string& name) const;
	bool contains(const std::string& name) const;
};

size_t dtype_size(const std::string& dtype);

void write_blob(const std::filesystem::path& path, const std::string& format, int version, const Blob& blob);

/// Throws FormatError when the header is malformed, the format/version differ or the payload is truncated.
Blob read_blob(const std::filesystem::path& path, const std::string& format, int version);

BlobArray tensor_to_array(const std::string& name, const torch::Tensor& tensor);
torch::Tensor array_to_tensor(const BlobArray& array);

} // namespace resdreamer
