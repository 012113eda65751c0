#pragma once
namespace localrd::cli {
int run(int argc, char** argv);
}
