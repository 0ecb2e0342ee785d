#include <pybind11/pybind11.h>
PYBIND11_MODULE(_cardiq, m) { m.doc() = "stub"; }
