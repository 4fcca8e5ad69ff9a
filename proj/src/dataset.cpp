// SPDX-License-Identifier: Apache-2.0
#include "odegan/data/dataset.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace odegan::data {

namespace fs = std::filesystem;

namespace {

std::map<std::string, fs::path> scan_dir(const fs::path& dir) {
  if (!fs::is_directory(dir))
    throw core::IoError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto& p = entry.path();
    std::string name = p.filename().string();
    if (!name.empty() && name[0] == '.') continue;
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (ext != ".png")
      throw core::IoError("unsupported image format: " + p.string());
    out[p.stem().string()] = p;
  }
  if (out.empty())
    throw core::ConfigError("empty dataset directory: " + dir.string());
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) s += ", ";
    s += items[i];
  }
  return s;
}

}  // namespace

Manifest scan_and_pair(const DatasetLayout& layout) {
  auto src = scan_dir(layout.pseudo_src_dir);
  auto tgt = scan_dir(layout.pseudo_tgt_dir);

  std::vector<std::string> orphans;
  for (const auto& [stem, path] : src)
    if (!tgt.count(stem)) orphans.push_back(stem);
  for (const auto& [stem, path] : tgt)
    if (!src.count(stem)) orphans.push_back(stem);
  if (!orphans.empty()) {
    std::sort(orphans.begin(), orphans.end());
    throw core::ConfigError("pseudo pairing failed; orphan stems: " +
                            join(orphans));
  }

  Manifest m;
  for (const auto& [stem, path] : src)
    m.pairs.push_back({stem, path, tgt.at(stem)});
  for (const auto& [stem, path] : scan_dir(layout.unpaired_src_dir))
    m.unpaired_src.push_back({stem, path});
  for (const auto& [stem, path] : scan_dir(layout.unpaired_tgt_dir))
    m.unpaired_tgt.push_back({stem, path});
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw core::IoError("cannot write manifest: " + path.string());
  f << "# odegan-manifest v1\n# pairs\n";
  for (const auto& p : m.pairs)
    f << p.id << '\t' << p.src_path.string() << '\t' << p.tgt_path.string()
      << '\n';
  f << "# unpaired_src\n";
  for (const auto& e : m.unpaired_src)
    f << e.id << '\t' << e.path.string() << "\t\n";
  f << "# unpaired_tgt\n";
  for (const auto& e : m.unpaired_tgt)
    f << e.id << '\t' << e.path.string() << "\t\n";
  if (!f) throw core::IoError("failed writing manifest: " + path.string());
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw core::IoError("cannot read manifest: " + path.string());
  Manifest m;
  std::string line;
  int section = -1;  // 0 pairs, 1 unpaired_src, 2 unpaired_tgt
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line == "# pairs")
        section = 0;
      else if (line == "# unpaired_src")
        section = 1;
      else if (line == "# unpaired_tgt")
        section = 2;
      else if (line.rfind("# odegan-manifest", 0) != 0)
        throw core::IoError("manifest: unknown section '" + line + "'");
      continue;
    }
    std::size_t t1 = line.find('\t');
    std::size_t t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos || section < 0)
      throw core::IoError("manifest: malformed row '" + line + "'");
    std::string id = line.substr(0, t1);
    std::string a = line.substr(t1 + 1, t2 - t1 - 1);
    std::string b = line.substr(t2 + 1);
    if (section == 0)
      m.pairs.push_back({id, a, b});
    else if (section == 1)
      m.unpaired_src.push_back({id, a});
    else
      m.unpaired_tgt.push_back({id, a});
  }
  return m;
}

Image stylize_fixture(const Image& img) {
  Image out = img;
  // 4 levels per channel (a 64-color palette).
  for (auto& v : out.pixels) v = std::uint8_t((v / 64) * 85);

  // Darken strong edges of the posterized image. Sobel on integer luminance
  // with replicated borders keeps the operation exact and flip-equivariant.
  const long w = long(out.width), h = long(out.height);
  std::vector<int> lum(std::size_t(w) * std::size_t(h));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      int r = out.at(y, x, 0), g = out.at(y, x, 1), b = out.at(y, x, 2);
      lum[std::size_t(y * w + x)] = (299 * r + 587 * g + 114 * b) / 1000;
    }
  auto L = [&](long y, long x) {
    y = std::clamp(y, 0L, h - 1);
    x = std::clamp(x, 0L, w - 1);
    return lum[std::size_t(y * w + x)];
  };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      int gx = -L(y - 1, x - 1) - 2 * L(y, x - 1) - L(y + 1, x - 1) +
               L(y - 1, x + 1) + 2 * L(y, x + 1) + L(y + 1, x + 1);
      int gy = -L(y - 1, x - 1) - 2 * L(y - 1, x) - L(y - 1, x + 1) +
               L(y + 1, x - 1) + 2 * L(y + 1, x) + L(y + 1, x + 1);
      if (std::abs(gx) + std::abs(gy) >= 160)
        for (std::size_t c = 0; c < 3; ++c)
          out.at(y, x, c) = std::uint8_t(out.at(y, x, c) / 3);
    }
  return out;
}

namespace {

Image render_fixture(core::Rng rng, std::size_t size) {
  Image img;
  img.width = img.height = size;
  img.pixels.assign(size * size * 3, 0);

  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = double(rng.below(256));
    c1[c] = double(rng.below(256));
  }
  double wx = rng.uniform01(), wy = 1.0 - wx;
  const double denom = double(size - 1);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double t = (wx * double(x) + wy * double(y)) / denom;
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) = std::uint8_t(
            std::clamp(c0[c] + (c1[c] - c0[c]) * t, 0.0, 255.0));
    }

  const std::size_t n_shapes = 2 + rng.below(3);
  for (std::size_t s = 0; s < n_shapes; ++s) {
    std::uint8_t col[3] = {std::uint8_t(rng.below(256)),
                           std::uint8_t(rng.below(256)),
                           std::uint8_t(rng.below(256))};
    long cy = long(rng.below(size)), cx = long(rng.below(size));
    long r = long(size / 8 + rng.below(std::max<std::size_t>(size / 4, 1)));
    bool circle = rng.below(2) == 0;
    for (long y = std::max(0L, cy - r); y <= std::min(long(size) - 1, cy + r);
         ++y)
      for (long x = std::max(0L, cx - r);
           x <= std::min(long(size) - 1, cx + r); ++x) {
        if (circle && (y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r)
          continue;
        for (std::size_t c = 0; c < 3; ++c)
          img.at(std::size_t(y), std::size_t(x), c) = col[c];
      }
  }
  return img;
}

}  // namespace

DatasetLayout make_fixtures(const fs::path& out_dir, std::size_t n,
                            std::uint64_t seed, std::size_t size) {
  if (n < 2) throw core::UsageError("make_fixtures: need n >= 2");
  if (size < 8) throw core::UsageError("make_fixtures: size too small");
  DatasetLayout lay{out_dir / "pseudo_src", out_dir / "pseudo_tgt",
                    out_dir / "unpaired_src", out_dir / "unpaired_tgt", size};
  for (const auto& d : {lay.pseudo_src_dir, lay.pseudo_tgt_dir,
                        lay.unpaired_src_dir, lay.unpaired_tgt_dir})
    fs::create_directories(d);

  char name[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(name, sizeof(name), "fix_%03zu.png", i);
    Image img = render_fixture(core::Rng::derive(seed, "fixture-pseudo", i),
                               size);
    save_png(lay.pseudo_src_dir / name, img);
    save_png(lay.pseudo_tgt_dir / name, stylize_fixture(img));
  }
  for (std::size_t i = 0; i < n / 2; ++i) {
    std::snprintf(name, sizeof(name), "u_%03zu.png", i);
    save_png(lay.unpaired_src_dir / name,
             render_fixture(core::Rng::derive(seed, "fixture-usrc", i), size));
  }
  for (std::size_t i = 0; i < n / 2; ++i) {
    std::snprintf(name, sizeof(name), "v_%03zu.png", i);
    Image img = render_fixture(core::Rng::derive(seed, "fixture-utgt", i),
                               size);
    save_png(lay.unpaired_tgt_dir / name, stylize_fixture(img));
  }
  return lay;
}

}  // namespace odegan::data
