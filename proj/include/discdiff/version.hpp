#pragma once

#ifndef DISCDIFF_VERSION
#define DISCDIFF_VERSION "0.1.0"
#endif
