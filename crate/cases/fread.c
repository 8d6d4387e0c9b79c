/* Reads a file to EOF in fixed-size chunks. */
#include <stdio.h>
#include <stdlib.h>

int main(int argc, char **argv)
{
	if (argc < 3) {
		fprintf(stderr, "usage: %s <input> <chunk-bytes>\n", argv[0]);
		return 2;
	}
	size_t chunk = strtoul(argv[2], NULL, 10);
	char *buf = malloc(chunk ? chunk : 1);
	FILE *f = fopen(argv[1], "rb");
	if (!f || !buf) {
		perror(argv[1]);
		return 1;
	}
	unsigned long long total = 0;
	size_t n;
	while ((n = fread(buf, 1, chunk, f)) > 0)
		total += n;
	fclose(f);
	free(buf);
	printf("%llu\n", total);
	return 0;
}
