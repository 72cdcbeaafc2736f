#include "core/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "core/error.hpp"

namespace trompt {

namespace {
constexpr char kMagic[8] = {'T', 'R', 'M', 'P', 'T', 'C', 'K', '1'};
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["meta"] = ck.meta;
  auto& params = header["params"];
  params = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& e : ck.entries) {
    if (e.values.size() != shape_numel(e.shape))
      throw_internal("checkpoint entry " + e.name + ": value count mismatch");
    params.push_back({{"name", e.name}, {"shape", e.shape}, {"count", e.values.size()}});
    total += e.values.size();
  }
  std::string head = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_data("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& e : ck.entries)
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  if (!out) throw_data("short write to checkpoint " + path);
  (void)total;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_data("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw_data(path + " is not a checkpoint file");
  std::uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw_data("truncated checkpoint header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const std::exception& e) {
    throw_data(std::string("bad checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& p : header.at("params")) {
    Checkpoint::Entry e;
    e.name = p.at("name").get<std::string>();
    e.shape = p.at("shape").get<Shape>();
    std::size_t count = p.at("count").get<std::size_t>();
    e.values.resize(count);
    in.read(reinterpret_cast<char*>(e.values.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw_data("truncated checkpoint payload in " + path);
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

}  // namespace trompt
