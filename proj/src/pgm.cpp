#include "panp/pgm.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace panp {

namespace {

// Skips whitespace and '#' comment lines, then reads one ASCII token.
std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
    } else if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#')
        tok.push_back(static_cast<char>(in.get()));
      return tok;
    }
  }
  return tok;
}

long parse_number(const std::string& tok, const char* what) {
  if (tok.empty()) throw std::runtime_error(std::string("pgm: missing ") + what);
  try {
    size_t pos = 0;
    long v = std::stol(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(std::string("pgm: bad ") + what + " '" + tok + "'");
  }
}

}  // namespace

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path);
  std::string magic = next_token(in);
  if (magic != "P5") throw std::runtime_error("pgm: " + path + " is not binary PGM (P5)");
  const long w = parse_number(next_token(in), "width");
  const long h = parse_number(next_token(in), "height");
  const long maxval = parse_number(next_token(in), "maxval");
  if (w != h || w < 1) throw std::runtime_error("pgm: image must be square, got " +
                                                std::to_string(w) + "x" + std::to_string(h));
  if (w > 32) throw std::runtime_error("pgm: side " + std::to_string(w) + " exceeds 32");
  if (maxval != 255) throw std::runtime_error("pgm: only maxval 255 supported, got " +
                                              std::to_string(maxval));
  in.get();  // single whitespace byte after the header
  const size_t n = static_cast<size_t>(w) * static_cast<size_t>(w);
  std::vector<char> raw(n);
  in.read(raw.data(), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw std::runtime_error("pgm: " + path + " truncated");
  Tensor img({static_cast<size_t>(w), static_cast<size_t>(w)});
  for (size_t i = 0; i < n; ++i)
    img.data()[i] = static_cast<double>(static_cast<unsigned char>(raw[i])) / 255.0;
  return img;
}

void write_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 2 || img.rows() != img.cols())
    throw std::runtime_error("pgm: can only write square images, got shape " + img.shape_str());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pgm: cannot write " + path);
  out << "P5\n" << img.rows() << " " << img.cols() << "\n255\n";
  for (double v : img.data()) {
    double c = std::min(1.0, std::max(0.0, v));
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!out) throw std::runtime_error("pgm: write failed for " + path);
}

}  // namespace panp
