#include <cmath>
#include <cstdio>
#include <fstream>

#include "crackmamba/data.hpp"

namespace crackmamba {

namespace {

// Header tokens are separated by whitespace; '#' starts a comment running to
// end of line. Returns the token and advances `pos`.
std::string next_token(const std::string& buf, std::size_t& pos, const std::string& path) {
  while (pos < buf.size()) {
    if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= buf.size()) throw PnmParseError(path, "unexpected end of header", pos);
  const std::size_t start = pos;
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos])) && buf[pos] != '#')
    ++pos;
  return buf.substr(start, pos - start);
}

Index parse_int(const std::string& tok, const std::string& path, std::size_t pos) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument("");
    return static_cast<Index>(v);
  } catch (...) {
    throw PnmParseError(path, "bad header integer '" + tok + "'", pos);
  }
}

}  // namespace

PnmImage read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for reading");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  const std::string magic = next_token(buf, pos, path);
  PnmImage img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw PnmParseError(path, "unsupported magic '" + magic + "'", 0);

  img.width = parse_int(next_token(buf, pos, path), path, pos);
  img.height = parse_int(next_token(buf, pos, path), path, pos);
  const std::size_t maxval_at = pos;
  const Index maxval = parse_int(next_token(buf, pos, path), path, pos);
  if (maxval != 255) throw PnmParseError(path, "maxval must be 255", maxval_at);
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos])))
    throw PnmParseError(path, "missing whitespace after maxval", pos);
  ++pos;  // exactly one whitespace byte before the payload

  const std::size_t need = static_cast<std::size_t>(img.width * img.height * img.channels);
  if (buf.size() - pos < need)
    throw PnmParseError(path,
                        "truncated payload: need " + std::to_string(need) + " bytes, have " +
                            std::to_string(buf.size() - pos),
                        pos);
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                    buf.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

void write_pnm(const std::string& path, const PnmImage& img) {
  check_arg(img.channels == 1 || img.channels == 3, "write_pnm: channels must be 1 or 3");
  check_arg(static_cast<Index>(img.pixels.size()) == img.width * img.height * img.channels,
            "write_pnm: pixel buffer size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for writing");
  f << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError(path + ": write failed");
}

void write_image(const std::string& path, const Tensor<float>& image) {
  check_arg(image.rank() == 3 && image.dim(0) == 3,
            "write_image: expected [3,H,W], got " + shape_str(image.shape()));
  PnmImage img;
  img.channels = 3;
  img.height = image.dim(1);
  img.width = image.dim(2);
  img.pixels.resize(static_cast<std::size_t>(3 * img.height * img.width));
  const Index hw = img.height * img.width;
  for (Index p = 0; p < hw; ++p)
    for (Index c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * hw + p], 0.0f, 1.0f);
      img.pixels[static_cast<std::size_t>(p * 3 + c)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  write_pnm(path, img);
}

void write_mask(const std::string& path, const Tensor<std::uint8_t>& mask) {
  check_arg(mask.rank() == 2, "write_mask: expected [H,W], got " + shape_str(mask.shape()));
  PnmImage img;
  img.channels = 1;
  img.height = mask.dim(0);
  img.width = mask.dim(1);
  img.pixels.resize(static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i)
    img.pixels[static_cast<std::size_t>(i)] = mask[i] ? 255 : 0;
  write_pnm(path, img);
}

Tensor<float> read_image(const std::string& path) {
  const PnmImage img = read_pnm(path);
  Tensor<float> out({3, img.height, img.width});
  const Index hw = img.height * img.width;
  for (Index p = 0; p < hw; ++p)
    for (Index c = 0; c < 3; ++c) {
      const std::uint8_t byte =
          img.channels == 3 ? img.pixels[static_cast<std::size_t>(p * 3 + c)]
                            : img.pixels[static_cast<std::size_t>(p)];
      out[c * hw + p] = static_cast<float>(byte) / 255.0f;
    }
  return out;
}

Tensor<std::uint8_t> read_mask(const std::string& path) {
  const PnmImage img = read_pnm(path);
  check_arg(img.channels == 1, path + ": mask must be P5 grayscale");
  Tensor<std::uint8_t> out({img.height, img.width});
  for (Index i = 0; i < out.size(); ++i)
    out[i] = img.pixels[static_cast<std::size_t>(i)] > 0 ? 1 : 0;
  return out;
}

}  // namespace crackmamba
