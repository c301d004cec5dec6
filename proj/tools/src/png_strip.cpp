#include "resdreamer_cli/cli.h"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace resdreamer::cli
{

void write_png(const std::filesystem::path& path, const std::vector<uint8_t>& rgb, int height, int width)
{
	if (rgb.size() != static_cast<size_t>(height) * width * 3)
	{
		throw std::invalid_argument("write_png: buffer does not match dimensions");
	}
	std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
	if (!file)
	{
		throw std::runtime_error("write_png: cannot open " + path.string());
	}
	png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
	png_infop info = png ? png_create_info_struct(png) : nullptr;
	if (png == nullptr || info == nullptr)
	{
		png_destroy_write_struct(&png, &info);
		throw std::runtime_error("write_png: libpng initialisation failed");
	}
	if (setjmp(png_jmpbuf(png)))
	{
		png_destroy_write_struct(&png, &info);
		throw std::runtime_error("write_png: libpng error while writing " + path.string());
	}
	png_init_io(png, file.get());
	png_set_IHDR(
		png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
	// no timestamp chunk, so identical inputs give identical files
	png_write_info(png, info);
	for (int y = 0; y < height; ++y)
	{
		png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<size_t>(y) * width * 3));
	}
	png_write_end(png, nullptr);
	png_destroy_write_struct(&png, &info);
}

} // namespace resdreamer::cli
