/* Seeks to i * step for i in [0, loops). */
#include <stdio.h>
#include <stdlib.h>

int main(int argc, char **argv)
{
	if (argc < 4) {
		fprintf(stderr, "usage: %s <input> <loops> <step-bytes>\n", argv[0]);
		return 2;
	}
	long loops = strtol(argv[2], NULL, 10);
	long step = strtol(argv[3], NULL, 10);
	FILE *f = fopen(argv[1], "rb");
	if (!f) {
		perror(argv[1]);
		return 1;
	}
	for (long i = 0; i < loops; i++) {
		if (fseek(f, i * step, SEEK_SET) != 0) {
			perror("fseek");
			return 1;
		}
	}
	fclose(f);
	return 0;
}
