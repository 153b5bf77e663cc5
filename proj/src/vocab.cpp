#include "vlab/vocab.hpp"

#include <unordered_map>

namespace vlab {
namespace vocab {

namespace {

std::vector<std::string> build_words() {
  std::vector<std::string> w = {
      "<pad>", "<bos>", "?", "yes", "no",
      "is", "present", "a", "an", "and", "scene", "empty", "describe", "look", ":",
      // 20 object nouns
      "apple", "ball", "book", "bottle", "bowl", "cat", "chair", "clock", "cup", "dog",
      "fork", "lamp", "leaf", "mug", "pen", "plate", "shoe", "spoon", "table", "vase",
      // 6 color names
      "black", "blue", "green", "red", "white", "yellow"};
  for (int i = 0; int(w.size()) < kSize; ++i) {
    w.push_back("<r" + std::to_string(i) + ">");
  }
  return w;
}

}  // namespace

const std::vector<std::string>& words() {
  static const std::vector<std::string> w = build_words();
  return w;
}

int object_token(int type) {
  if (type < 0 || type >= kObjectCount) {
    throw IndexError("object type " + std::to_string(type) + " out of range [0, " +
                     std::to_string(kObjectCount) + ")");
  }
  return kObjectBase + type;
}

int color_token(int color) {
  if (color < 0 || color >= kColorCount) {
    throw IndexError("color " + std::to_string(color) + " out of range [0, " +
                     std::to_string(kColorCount) + ")");
  }
  return kColorBase + color;
}

int type_of_object_token(int token) {
  if (token < kObjectBase || token >= kObjectBase + kObjectCount) return -1;
  return token - kObjectBase;
}

const std::string& word(int token) {
  if (token < 0 || token >= kSize) {
    throw IndexError("token id " + std::to_string(token) + " out of range [0, " +
                     std::to_string(kSize) + ")");
  }
  return words()[token];
}

int lookup(const std::string& w) {
  static const std::unordered_map<std::string, int> index = [] {
    std::unordered_map<std::string, int> m;
    for (int i = 0; i < kSize; ++i) m[words()[i]] = i;
    return m;
  }();
  auto it = index.find(w);
  if (it == index.end()) {
    throw IndexError("unknown word '" + w + "'");
  }
  return it->second;
}

std::string decode(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

}  // namespace vocab
}  // namespace vlab
