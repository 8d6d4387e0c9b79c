/* Opens and closes the same file <loops> times. */
#include <stdio.h>
#include <stdlib.h>

int main(int argc, char **argv)
{
	if (argc < 3) {
		fprintf(stderr, "usage: %s <input> <loops>\n", argv[0]);
		return 2;
	}
	long loops = strtol(argv[2], NULL, 10);
	for (long i = 0; i < loops; i++) {
		FILE *f = fopen(argv[1], "rb");
		if (!f) {
			perror(argv[1]);
			return 1;
		}
		fclose(f);
	}
	return 0;
}
