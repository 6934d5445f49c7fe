#ifndef AAI_CLI_HPP
#define AAI_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace aai::cli {

// Exit codes: 0 success, 1 runtime failure, 2 bad arguments or config.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aai::cli

#endif  // AAI_CLI_HPP
