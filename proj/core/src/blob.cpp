#include "resdreamer/blob.h"

#include "resdreamer/errors.h"

#include <bit>
#include <cstring>
#include <fstream>

namespace resdreamer
{

static_assert(std::endian::native == std::endian::little, "blob files are written in host byte order");

int64_t BlobArray::elements() const
{
	int64_t n = 1;
	for (auto d : shape)
	{
		n *= d;
	}
	return n;
}

const BlobArray& Blob::array(const std::string& name) const
{
	for (const auto& a : arrays)
	{
		if (a.name == name)
		{
			return a;
		}
	}
	throw FormatError("blob: missing array '" + name + "'");
}

bool Blob::contains(const std::string& name) const
{
	for (const auto& a : arrays)
	{
		if (a.name == name)
		{
			return true;
		}
	}
	return false;
}

size_t dtype_size(const std::string& dtype)
{
	if (dtype == "uint8")
	{
		return 1;
	}
	if (dtype == "int32" || dtype == "float32")
	{
		return 4;
	}
	if (dtype == "int64" || dtype == "float64")
	{
		return 8;
	}
	throw FormatError("blob: unknown dtype '" + dtype + "'");
}

void write_blob(const std::filesystem::path& path, const std::string& format, int version, const Blob& blob)
{
	nlohmann::json header = blob.meta.is_null() ? nlohmann::json::object() : blob.meta;
	header["format"] = format;
	header["version"] = version;
	auto arrays = nlohmann::json::array();
	for (const auto& a : blob.arrays)
	{
		expects(a.bytes.size() == static_cast<size_t>(a.elements()) * dtype_size(a.dtype),
			"write_blob: byte size of '" + a.name + "' does not match its shape");
		arrays.push_back({{"name", a.name}, {"dtype", a.dtype}, {"shape", a.shape}});
	}
	header["arrays"] = arrays;

	if (path.has_parent_path())
	{
		std::filesystem::create_directories(path.parent_path());
	}
	auto tmp = path;
	tmp += ".tmp";
	{
		std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
		if (!out)
		{
			throw std::runtime_error("write_blob: cannot open " + tmp.string());
		}
		const auto line = header.dump() + "\n";
		out.write(line.data(), static_cast<std::streamsize>(line.size()));
		for (const auto& a : blob.arrays)
		{
			out.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
		}
		if (!out)
		{
			throw std::runtime_error("write_blob: write failed for " + tmp.string());
		}
	}
	std::filesystem::rename(tmp, path);
}

Blob read_blob(const std::filesystem::path& path, const std::string& format, int version)
{
	std::ifstream in(path, std::ios::binary);
	if (!in)
	{
		throw FormatError("read_blob: cannot open " + path.string());
	}
	std::string line;
	if (!std::getline(in, line))
	{
		throw FormatError("read_blob: missing header in " + path.string());
	}
	nlohmann::json header;
	try
	{
		header = nlohmann::json::parse(line);
	}
	catch (const nlohmann::json::exception& e)
	{
		throw FormatError("read_blob: corrupt header in " + path.string() + ": " + e.what());
	}
	if (!header.is_object() || !header.contains("format") || !header.contains("version") || !header.contains("arrays"))
	{
		throw FormatError("read_blob: incomplete header in " + path.string());
	}
	if (header["format"] != format)
	{
		throw FormatError("read_blob: unexpected format in " + path.string());
	}
	if (header["version"] != version)
	{
		throw FormatError(
			"read_blob: version " + header["version"].dump() + " in " + path.string() + ", expected " +
			std::to_string(version));
	}

	Blob blob;
	try
	{
		for (const auto& entry : header["arrays"])
		{
			BlobArray a;
			a.name = entry.at("name").get<std::string>();
			a.dtype = entry.at("dtype").get<std::string>();
			a.shape = entry.at("shape").get<std::vector<int64_t>>();
			for (auto d : a.shape)
			{
				if (d < 0)
				{
					throw FormatError("read_blob: negative dimension in " + path.string());
				}
			}
			a.bytes.resize(static_cast<size_t>(a.elements()) * dtype_size(a.dtype));
			in.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
			if (static_cast<size_t>(in.gcount()) != a.bytes.size())
			{
				throw FormatError("read_blob: truncated payload for '" + a.name + "' in " + path.string());
			}
			blob.arrays.push_back(std::move(a));
		}
	}
	catch (const nlohmann::json::exception& e)
	{
		throw FormatError("read_blob: malformed array table in " + path.string() + ": " + e.what());
	}
	if (in.peek() != std::char_traits<char>::eof())
	{
		throw FormatError("read_blob: trailing bytes in " + path.string());
	}
	header.erase("format");
	header.erase("version");
	header.erase("arrays");
	blob.meta = std::move(header);
	return blob;
}

namespace
{
std::string dtype_name(torch::ScalarType type)
{
	switch (type)
	{
		case torch::kUInt8: return "uint8";
		case torch::kInt32: return "int32";
		case torch::kInt64: return "int64";
		case torch::kFloat32: return "float32";
		case torch::kFloat64: return "float64";
		default: throw ContractError("blob: unsupported tensor dtype");
	}
}

torch::ScalarType scalar_type(const std::string& dtype)
{
	if (dtype == "uint8")
	{
		return torch::kUInt8;
	}
	if (dtype == "int32")
	{
		return torch::kInt32;
	}
	if (dtype == "int64")
	{
		return torch::kInt64;
	}
	if (dtype == "float32")
	{
		return torch::kFloat32;
	}
	if (dtype == "float64")
	{
		return torch::kFloat64;
	}
	throw FormatError("blob: unknown dtype '" + dtype + "'");
}
} // namespace

BlobArray tensor_to_array(const std::string& name, const torch::Tensor& tensor)
{
	auto t = tensor.detach().to(torch::kCPU).contiguous();
	if (t.scalar_type() == torch::kBool)
	{
		t = t.to(torch::kUInt8);
	}
	BlobArray a;
	a.name = name;
	a.dtype = dtype_name(t.scalar_type());
	a.shape = t.sizes().vec();
	a.bytes.resize(static_cast<size_t>(t.numel()) * t.element_size());
	if (!a.bytes.empty())
	{
		std::memcpy(a.bytes.data(), t.data_ptr(), a.bytes.size());
	}
	return a;
}

torch::Tensor array_to_tensor(const BlobArray& array)
{
	auto t = torch::empty(array.shape, torch::TensorOptions().dtype(scalar_type(array.dtype)));
	if (!array.bytes.empty())
	{
		std::memcpy(t.data_ptr(), array.bytes.data(), array.bytes.size());
	}
	return t;
}

} // namespace resdreamer
