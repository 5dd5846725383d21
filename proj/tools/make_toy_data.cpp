// Writes the toy MLM corpus and a labeled TSV derived from it.
// Label: 1 when the document holds more than one sentence, else 0.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "narrowbert/data.hpp"

int main(int argc, char** argv) {
  CLI::App app{"toy corpus generator"};
  std::size_t lines = 4000, labeled = 600;
  std::uint64_t seed = 5;
  std::string corpus = "toy_corpus.txt", tsv = "toy_labels.tsv";
  app.add_option("--lines", lines)->capture_default_str();
  app.add_option("--labeled", labeled)->capture_default_str();
  app.add_option("--seed", seed)->capture_default_str();
  app.add_option("--corpus", corpus)->capture_default_str();
  app.add_option("--tsv", tsv)->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::ofstream out(corpus);
  for (const auto& l : narrowbert::toy_corpus(lines, seed)) out << l << '\n';
  std::ofstream lab(tsv);
  for (const auto& l : narrowbert::toy_corpus(labeled, seed + 1)) {
    const auto periods = std::count(l.begin(), l.end(), '.');
    lab << l << '\t' << (periods > 1 ? 1 : 0) << '\n';
  }
  if (!out || !lab) {
    std::cerr << "write failed\n";
    return 1;
  }
  return 0;
}
