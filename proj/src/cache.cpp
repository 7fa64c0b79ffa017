#include "minstore/cache.hpp"
#include "minstore/error.hpp"
#include "minstore/nar.hpp"

#include <httplib.h>

#include <fstream>
#include <sstream>

namespace minstore {

namespace fs = std::filesystem;

std::string NarInfo::render() const
{
    std::string out;
    out += "StorePath: " + store_path + "\n";
    out += "NarHash: " + nar_hash + "\n";
    out += "NarSize: " + std::to_string(nar_size) + "\n";
    out += "References:";
    for (auto & r : references)
        out += " " + r;
    out += "\n";
    if (deriver)
        out += "Deriver: " + *deriver + "\n";
    if (eq_class)
        out += "EqClass: " + *eq_class + "\n";
    return out;
}

NarInfo NarInfo::parse(std::string_view text)
{
    NarInfo info;
    bool have_path = false, have_hash = false, have_size = false, have_refs = false;
    size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        auto nl = text.find('\n');
        if (nl == std::string_view::npos)
            throw BadNarInfo("line " + std::to_string(line_no) + " is not terminated");
        auto line = text.substr(0, nl);
        text.remove_prefix(nl + 1);
        auto colon = line.find(':');
        if (colon == std::string_view::npos)
            throw BadNarInfo("line " + std::to_string(line_no) + " has no field name");
        auto key = line.substr(0, colon);
        auto value = line.substr(colon + 1);
        if (!value.empty() && value.front() == ' ')
            value.remove_prefix(1);
        std::string v(value);
        if (key == "StorePath" && !have_path) {
            info.store_path = v;
            have_path = true;
        } else if (key == "NarHash" && !have_hash) {
            if (!valid_hash_part(v))
                throw BadNarInfo("malformed NarHash '" + v + "'");
            info.nar_hash = v;
            have_hash = true;
        } else if (key == "NarSize" && !have_size) {
            if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || v.size() > 19)
                throw BadNarInfo("malformed NarSize '" + v + "'");
            info.nar_size = std::stoull(v);
            have_size = true;
        } else if (key == "References" && !have_refs) {
            std::istringstream in(v);
            for (std::string r; in >> r;)
                info.references.push_back(r);
            have_refs = true;
        } else if (key == "Deriver" && !info.deriver)
            info.deriver = v;
        else if (key == "EqClass" && !info.eq_class) {
            if (!valid_hash_part(v))
                throw BadNarInfo("malformed EqClass '" + v + "'");
            info.eq_class = v;
        } else
            throw BadNarInfo("unexpected field '" + std::string(key) + "' on line " + std::to_string(line_no));
    }
    if (!have_path || !have_hash || !have_size || !have_refs)
        throw BadNarInfo("missing required field");
    return info;
}

NarInfo make_narinfo(const Store & store, const StorePath & path)
{
    auto info = store.query_info(path);
    NarInfo ni;
    ni.store_path = path.render();
    ni.nar_hash = info.nar_hash;
    ni.nar_size = info.nar_size;
    for (auto & r : info.references)
        ni.references.push_back(r.render());
    if (info.deriver)
        ni.deriver = info.deriver->render();
    ni.eq_class = info.eq_class;
    return ni;
}

namespace {

class HttpSubstituter : public Substituter
{
public:
    explicit HttpSubstituter(std::string url)
        : url_(std::move(url))
    {
        while (!url_.empty() && url_.back() == '/')
            url_.pop_back();
    }

    const std::string & url() const override
    {
        return url_;
    }

    std::optional<std::string> narinfo(std::string_view hash_part) override
    {
        return get("/" + std::string(hash_part) + ".narinfo");
    }

protected:
    std::optional<std::string> fetch_nar(std::string_view hash_part) override
    {
        return get("/nar/" + std::string(hash_part) + ".nar");
    }

private:
    std::string url_;

    std::optional<std::string> get(const std::string & route)
    {
        httplib::Client client(url_);
        client.set_connection_timeout(substituter_timeout_seconds, 0);
        client.set_read_timeout(substituter_timeout_seconds, 0);
        client.set_write_timeout(substituter_timeout_seconds, 0);
        auto res = client.Get(route);
        if (!res)
            throw SubstituterUnreachable(
                "cannot reach '" + url_ + "': " + httplib::to_string(res.error()));
        if (res->status == 404)
            return std::nullopt;
        if (res->status != 200)
            throw SubstituterUnreachable("'" + url_ + route + "' answered HTTP " + std::to_string(res->status));
        return res->body;
    }
};

class DirectorySubstituter : public Substituter
{
public:
    DirectorySubstituter(std::string url, fs::path dir)
        : url_(std::move(url))
        , dir_(std::move(dir))
    {
    }

    const std::string & url() const override
    {
        return url_;
    }

    std::optional<std::string> narinfo(std::string_view hash_part) override
    {
        return read(dir_ / (std::string(hash_part) + ".narinfo"));
    }

protected:
    std::optional<std::string> fetch_nar(std::string_view hash_part) override
    {
        return read(dir_ / "nar" / (std::string(hash_part) + ".nar"));
    }

private:
    std::string url_;
    fs::path dir_;

    std::optional<std::string> read(const fs::path & file)
    {
        std::error_code ec;
        if (!fs::is_directory(dir_, ec))
            throw SubstituterUnreachable("cache directory '" + dir_.string() + "' does not exist");
        std::ifstream in(file, std::ios::binary);
        if (!in)
            return std::nullopt;
        std::stringstream buf;
        buf << in.rdbuf();
        return buf.str();
    }
};

void write_file(const fs::path & path, const std::string & contents)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << contents;
        if (!out)
            throw Io("cannot write '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

} // namespace

std::shared_ptr<Substituter> open_substituter(const std::string & url)
{
    if (url.starts_with("http://"))
        return std::make_shared<HttpSubstituter>(url);
    if (url.starts_with("file://"))
        return std::make_shared<DirectorySubstituter>(url, url.substr(7));
    if (url.starts_with("/"))
        return std::make_shared<DirectorySubstituter>(url, url);
    throw SubstituterUnreachable("unsupported substituter '" + url + "'");
}

SubstituterList open_substituters(const std::vector<std::string> & urls)
{
    SubstituterList list;
    for (auto & u : urls)
        list.push_back(open_substituter(u));
    return list;
}

CacheServer::CacheServer(const Store & store, const std::string & bind_address)
    : store_(store)
    , server_(std::make_unique<httplib::Server>())
{
    auto colon = bind_address.rfind(':');
    if (colon == std::string::npos)
        throw BindFailed("bind address '" + bind_address + "' is not host:port");
    host_ = bind_address.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(bind_address.substr(colon + 1));
    } catch (...) {
        throw BindFailed("bad port in '" + bind_address + "'");
    }

    server_->Get(R"(/([0-9a-z]{32})\.narinfo)", [this](const httplib::Request & req, httplib::Response & res) {
        auto path = store_.lookup_hash_part(req.matches[1].str());
        if (!path) {
            res.status = 404;
            return;
        }
        res.set_content(make_narinfo(store_, *path).render(), "text/x-nix-narinfo");
    });
    server_->Get(R"(/nar/([0-9a-z]{32})\.nar)", [this](const httplib::Request & req, httplib::Response & res) {
        auto path = store_.lookup_hash_part(req.matches[1].str());
        if (!path) {
            res.status = 404;
            return;
        }
        res.set_content(nar_encode(store_.read_tree(*path)), "application/x-nix-archive");
    });

    if (port == 0)
        port_ = server_->bind_to_any_port(host_);
    else
        port_ = server_->bind_to_port(host_, port) ? port : -1;
    if (port_ <= 0)
        throw BindFailed("cannot bind to '" + bind_address + "'");
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

CacheServer::~CacheServer()
{
    stop();
}

std::string CacheServer::url() const
{
    return "http://" + host_ + ":" + std::to_string(port_);
}

void CacheServer::wait()
{
    if (thread_.joinable())
        thread_.join();
}

void CacheServer::stop()
{
    server_->stop();
    wait();
}

bool ConsensusVerdict::trusts(const std::string & url) const
{
    if (!accepted)
        return false;
    auto it = votes.find(url);
    return it != votes.end() && it->second.kind == Vote::Kind::Hash && it->second.nar_hash == *agreeing_hash;
}

ConsensusVerdict consensus_check(const StorePath & path, const SubstituterList & substituters, size_t quorum)
{
    ConsensusVerdict verdict;
    std::map<std::string, size_t> tally;
    for (auto & sub : substituters) {
        Vote vote;
        try {
            auto text = sub->narinfo(path.hash_part());
            if (text) {
                auto info = NarInfo::parse(*text);
                if (info.store_path == path.render()) {
                    vote.kind = Vote::Kind::Hash;
                    vote.nar_hash = info.nar_hash;
                    ++tally[info.nar_hash];
                }
            }
        } catch (SubstituterUnreachable &) {
            vote.kind = Vote::Kind::Unreachable;
        } catch (BadNarInfo &) {
            vote.kind = Vote::Kind::Missing;
        }
        verdict.votes[sub->url()] = vote;
    }

    size_t best = 0;
    size_t holders = 0;
    for (auto & [hash, n] : tally) {
        if (n > best) {
            best = n;
            holders = 1;
            verdict.agreeing_hash = hash;
        } else if (n == best)
            ++holders;
    }
    verdict.accepted = holders == 1 && best >= std::max<size_t>(quorum, 1);
    if (!verdict.accepted)
        verdict.agreeing_hash.reset();
    for (auto & [url, vote] : verdict.votes)
        if (vote.kind == Vote::Kind::Hash && (!verdict.accepted || vote.nar_hash != *verdict.agreeing_hash))
            verdict.dissenters.push_back(url);
    return verdict;
}

namespace {

/// Result of trying one substituter for one path.
enum class Attempt { Done, Missing, Corrupt };

class Substitution
{
public:
    Substitution(Store & store, const SubstituterList & substituters, std::optional<size_t> quorum)
        : store_(store)
        , substituters_(substituters)
        , quorum_(quorum)
    {
    }

    bool run(const StorePath & path)
    {
        if (store_.is_valid(path))
            return true;
        if (auto it = done_.find(path); it != done_.end())
            return it->second;

        SubstituterList trusted = substituters_;
        if (quorum_) {
            auto verdict = consensus_check(path, substituters_, *quorum_);
            trusted.clear();
            for (auto & sub : substituters_)
                if (verdict.trusts(sub->url()))
                    trusted.push_back(sub);
        }

        bool ok = false;
        for (auto & sub : trusted) {
            try {
                auto attempt = try_one(*sub, path);
                if (attempt == Attempt::Done) {
                    ok = true;
                    break;
                }
            } catch (SubstituterUnreachable &) {
            } catch (BadNarInfo &) {
            }
        }
        done_[path] = ok;
        return ok;
    }

    const std::optional<std::string> & mismatch() const
    {
        return mismatch_;
    }

private:
    Store & store_;
    const SubstituterList & substituters_;
    std::optional<size_t> quorum_;
    std::map<StorePath, bool> done_;
    std::optional<std::string> mismatch_;

    Attempt try_one(Substituter & sub, const StorePath & path)
    {
        auto text = sub.narinfo(path.hash_part());
        if (!text)
            return Attempt::Missing;
        auto info = NarInfo::parse(*text);
        if (info.store_path != path.render())
            return Attempt::Missing;

        std::set<StorePath> refs;
        for (auto & r : info.references) {
            auto ref = store_.parse_path(r);
            refs.insert(ref);
            if (ref != path && !run(ref))
                return Attempt::Missing;
        }

        auto nar = sub.nar(path.hash_part());
        if (!nar)
            return Attempt::Missing;
        auto actual = nar_hash_of(*nar);
        if (nar->size() != info.nar_size || actual != info.nar_hash) {
            mismatch_ = "archive of '" + path.render() + "' from '" + sub.url() + "' hashes to " + actual
                + " (size " + std::to_string(nar->size()) + "), expected " + info.nar_hash + " (size "
                + std::to_string(info.nar_size) + ")";
            return Attempt::Corrupt;
        }
        Fso tree;
        try {
            tree = nar_decode(*nar);
        } catch (MalformedArchive & e) {
            mismatch_ = "archive of '" + path.render() + "' from '" + sub.url() + "' is malformed: " + e.what();
            return Attempt::Corrupt;
        }
        std::optional<StorePath> deriver;
        if (info.deriver)
            try {
                deriver = store_.parse_path(*info.deriver);
            } catch (BadPath &) {
            }
        store_.register_objects({NewObject{path, std::move(tree), std::move(refs), deriver, info.eq_class}});
        return Attempt::Done;
    }
};

} // namespace

bool substitute(Store & store, const StorePath & path, const SubstituterList & substituters)
{
    Substitution s(store, substituters, std::nullopt);
    if (s.run(path))
        return true;
    if (s.mismatch())
        throw HashMismatch(*s.mismatch());
    return false;
}

bool substitute_with_consensus(Store & store, const StorePath & path, const SubstituterList & substituters, size_t quorum)
{
    Substitution s(store, substituters, quorum);
    if (s.run(path))
        return true;
    if (s.mismatch())
        throw HashMismatch(*s.mismatch());
    return false;
}

void export_closure(const Store & store, const StorePath & path, const fs::path & dir)
{
    std::error_code ec;
    fs::create_directories(dir / "nar", ec);
    if (ec)
        throw Io("cannot create '" + (dir / "nar").string() + "': " + ec.message());
    for (auto & p : store.closure({path})) {
        write_file(dir / "nar" / (p.hash_part() + ".nar"), nar_encode(store.read_tree(p)));
        write_file(dir / (p.hash_part() + ".narinfo"), make_narinfo(store, p).render());
    }
}

RepairFetcher make_repair_fetcher(const SubstituterList & substituters)
{
    return [substituters](const StorePath & path, const PathInfo & info) -> std::optional<Fso> {
        for (auto & sub : substituters) {
            try {
                auto nar = sub->nar(path.hash_part());
                if (nar && nar_hash_of(*nar) == info.nar_hash && nar->size() == info.nar_size)
                    return nar_decode(*nar);
            } catch (Error &) {
            }
        }
        return std::nullopt;
    };
}

} // namespace minstore
