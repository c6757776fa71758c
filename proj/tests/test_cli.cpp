// Exit-code contract of the rpp executable; argv[1] is its path.
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

namespace {

int run(const std::string& cmd) {
  const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <rpp>\n");
    return 2;
  }
  const std::string bin = argv[1];
  const auto out = std::filesystem::temp_directory_path() / "rpp_cli_test";
  std::filesystem::remove_all(out);
  const std::string o = " --out " + out.string();
  struct Case {
    std::string args;
    int want;
  };
  const std::vector<Case> cases = {
      {"", 2},
      {"--help", 0},
      {"frobnicate", 2},
      {"train --epochs 0" + o, 2},
      {"train --no-such-flag" + o, 2},
      {"train --epochs many" + o, 2},
      {"--set train.bogus=1 verify identities" + o, 2},
      {"--set novalue verify identities" + o, 2},
      {"verify" + o, 2},
      {"verify grad-check" + o, 0},
      {"verify identities" + o, 0},
      {"verify unbiasedness" + o, 0},
      {"--set verify.grad_tol=1e-30 verify grad-check" + o, 1},
      {"--config /nonexistent.ini verify identities" + o, 2},
      {"eval top1 --student /nonexistent.bin" + o, 3},
  };
  int failures = 0;
  for (const Case& c : cases) {
    const int got = run(bin + " " + c.args);
    const bool ok = got == c.want;
    failures += !ok;
    std::printf("%s  rpp %s -> %d (want %d)\n", ok ? "ok  " : "FAIL", c.args.c_str(), got, c.want);
  }
  const auto manifest = out / "manifest.jsonl";
  if (!std::filesystem::exists(manifest)) {
    std::printf("FAIL  manifest.jsonl missing\n");
    ++failures;
  }
  std::filesystem::remove_all(out);
  return failures ? 1 : 0;
}
