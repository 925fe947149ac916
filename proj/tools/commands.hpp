#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace tomoforge::cli {

enum ExitCode { kOk = 0, kConfigError = 2, kDivergence = 3, kIoError = 4 };

/// Readings container ("readings", "clean", optional "truth"; all f64,
/// leading batch axis) with the geometry and noise in "@ini".
struct ReadingsFile {
  ScanGeometry geometry;
  NoiseParams noise;
  std::size_t count = 0;
  std::vector<std::int32_t> readings;  // [count, A, D]
  std::vector<double> clean;           // [count, A, D]; empty if unknown
  std::vector<double> truth;           // [count, N, N]; empty if unknown

  Batch batch() const;
};

void write_readings(const std::string& path, const ReadingsFile& f);
ReadingsFile read_readings(const std::string& path);

/// Full command line: tomoforge <command> [options]. Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tomoforge::cli
