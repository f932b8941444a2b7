#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace evresid {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat typed key=value configuration. The schema is fixed at construction;
// unknown keys are hard errors so typos cannot pass silently. Every key can
// be overridden from the command line with --set key=value.
class RunConfig {
public:
    RunConfig();

    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);

    int64_t geti(const std::string& key) const;
    double getf(const std::string& key) const;
    bool getb(const std::string& key) const;
    const std::string& gets(const std::string& key) const;

    bool has(const std::string& key) const { return schema_.count(key) != 0; }
    std::string dump() const;

private:
    enum class Kind { kInt, kFloat, kBool, kString };
    struct Entry {
        Kind kind;
        std::string value;
    };
    std::map<std::string, Entry> schema_;
    const Entry& entry(const std::string& key) const;
};

} // namespace evresid
