#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mobi/common.hpp"

namespace mobi::bench {

// %.17g round-trips doubles exactly through text.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// CSV files start with a versioned schema comment naming every column, then
// the header row.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns,
              const std::string& schema = "mobi-csv v1")
            : out_(path) {
        MOBI_CHECK(out_.good(), "CsvWriter: cannot open " << path);
        out_ << "# " << schema << " columns:";
        for (const auto& c : columns) out_ << " " << c;
        out_ << "\n";
        write_cells(columns);
    }

    void row(const std::vector<std::string>& cells) { write_cells(cells); }

    void close() { out_.close(); }

private:
    void write_cells(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ",";
            out_ << cells[i];
        }
        out_ << "\n";
    }

    std::ofstream out_;
};

}  // namespace mobi::bench
